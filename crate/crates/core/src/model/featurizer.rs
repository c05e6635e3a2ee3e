//! Frozen observation featurizer: the toy stand-in for a pretrained speech
//! encoder used purely as a feature extractor.

use rand_distr::{Distribution, Normal};

use super::{FeaturizerConfig, ModelError};
use crate::autodiff::{Scalar, Tensor};
use crate::rng;

/// How one observation symbol relates to the confusable pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymbolKind {
    Plain,
    PairMember { pair: usize, side: usize },
    Ambiguous { pair: usize },
}

/// Builds the featurizer table: plain symbols get independent random
/// vectors; the members of pair `p` sit at `c_p ± δ_p` and the pair's
/// ambiguous symbol sits exactly at the centre `c_p`.
pub fn build_table(kinds: &[SymbolKind], feature_dim: usize, cfg: &FeaturizerConfig) -> Tensor<f32> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let num_pairs = kinds
        .iter()
        .filter_map(|k| match k {
            SymbolKind::PairMember { pair, .. } | SymbolKind::Ambiguous { pair } => Some(pair + 1),
            SymbolKind::Plain => None,
        })
        .max()
        .unwrap_or(0);
    let mut pair_rng = rng::stream(cfg.seed, "featurizer.pairs", 0);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..num_pairs)
        .map(|_| {
            let centre: Vec<f64> = (0..feature_dim).map(|_| normal.sample(&mut pair_rng)).collect();
            let delta: Vec<f64> = (0..feature_dim)
                .map(|_| normal.sample(&mut pair_rng) * cfg.pair_separation)
                .collect();
            (centre, delta)
        })
        .collect();
    let mut plain_rng = rng::stream(cfg.seed, "featurizer.plain", 0);
    let mut data = Vec::with_capacity(kinds.len() * feature_dim);
    for kind in kinds {
        match *kind {
            SymbolKind::Plain => {
                data.extend((0..feature_dim).map(|_| (normal.sample(&mut plain_rng) * cfg.plain_scale) as f32))
            }
            SymbolKind::PairMember { pair, side } => {
                let (c, d) = &pairs[pair];
                let sign = if side == 0 { 1.0 } else { -1.0 };
                data.extend(c.iter().zip(d).map(|(c, d)| (c + sign * d) as f32));
            }
            SymbolKind::Ambiguous { pair } => data.extend(pairs[pair].0.iter().map(|&c| c as f32)),
        }
    }
    Tensor::new(vec![kinds.len(), feature_dim], data).expect("table shape")
}

/// Feature vectors for a sequence of observations: table row plus the
/// observation's stored noise.
pub fn featurize<T: Scalar>(table: &Tensor<T>, symbols: &[u32], noise: &[Vec<f32>]) -> Result<Tensor<f32>, ModelError> {
    let dim = table.cols();
    let mut data = Vec::with_capacity(symbols.len() * dim);
    for (i, &s) in symbols.iter().enumerate() {
        if s as usize >= table.rows() {
            return Err(ModelError::UnknownSymbol { symbol: s });
        }
        let row = table.row(s as usize);
        match noise.get(i) {
            Some(n) if n.len() == dim => {
                data.extend(row.iter().zip(n).map(|(r, e)| (r.to_f64() + *e as f64) as f32));
            }
            Some(n) if !n.is_empty() => {
                return Err(ModelError::InvalidInput(format!(
                    "noise vector of length {} for feature_dim {}",
                    n.len(),
                    dim
                )))
            }
            _ => data.extend(row.iter().map(|r| r.to_f64() as f32)),
        }
    }
    Ok(Tensor::new(vec![symbols.len(), dim], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds() -> Vec<SymbolKind> {
        vec![
            SymbolKind::Plain,
            SymbolKind::PairMember { pair: 0, side: 0 },
            SymbolKind::PairMember { pair: 0, side: 1 },
            SymbolKind::Ambiguous { pair: 0 },
        ]
    }

    #[test]
    fn empty_sequence_gives_empty_features() {
        let table = build_table(&kinds(), 4, &FeaturizerConfig::default());
        let f = featurize(&table, &[], &[]).unwrap();
        assert_eq!(f.shape(), &[0, 4]);
    }

    #[test]
    fn ambiguous_symbol_is_pair_midpoint_and_shared() {
        let table = build_table(&kinds(), 4, &FeaturizerConfig::default());
        for j in 0..4 {
            let mid = (table.row(1)[j] as f64 + table.row(2)[j] as f64) / 2.0;
            assert!((mid - table.row(3)[j] as f64).abs() < 1e-6);
        }
        // Both members, when they emit the ambiguous symbol, produce the
        // same features.
        let a = featurize(&table, &[3], &[vec![]]).unwrap();
        let b = featurize(&table, &[3], &[vec![]]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn featurize_is_deterministic_and_rejects_unknown_symbols() {
        let table = build_table(&kinds(), 4, &FeaturizerConfig::default());
        let noise = vec![vec![0.1, -0.2, 0.0, 0.3]; 2];
        assert_eq!(
            featurize(&table, &[0, 1], &noise).unwrap(),
            featurize(&table, &[0, 1], &noise).unwrap()
        );
        assert_eq!(
            featurize(&table, &[9], &[vec![]]).unwrap_err(),
            ModelError::UnknownSymbol { symbol: 9 }
        );
    }
}
