use serde::{Deserialize, Serialize};

use crate::model::SymbolKind;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const CTX_SEP: u32 = 2;
pub const AUDIO_SEP: u32 = 3;
pub const TARGET_SEP: u32 = 4;
pub const PROMPT: u32 = 5;
pub const NUM_RESERVED: u32 = 6;

/// Token inventory.
///
/// ```text
/// 0..6                reserved (pad, eos, separators, prompt)
/// 6..6+2P             confusable pairs: (6+2p, 7+2p)
/// 6+2P..              common tokens
/// ```
///
/// Observation symbols: symbol `s = token - 6` for every non-reserved
/// token, followed by one ambiguous symbol per pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub num_pairs: usize,
    pub num_common: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            num_pairs: 16,
            num_common: 26,
        }
    }
}

impl Vocab {
    pub fn size(&self) -> usize {
        NUM_RESERVED as usize + 2 * self.num_pairs + self.num_common
    }

    pub fn pair_tokens(&self, pair: usize) -> (u32, u32) {
        let a = NUM_RESERVED + 2 * pair as u32;
        (a, a + 1)
    }

    pub fn common_token(&self, i: usize) -> u32 {
        NUM_RESERVED + 2 * self.num_pairs as u32 + i as u32
    }

    /// `(pair, side)` of a topic token.
    pub fn pair_of(&self, token: u32) -> Option<(usize, usize)> {
        let lo = NUM_RESERVED;
        let hi = NUM_RESERVED + 2 * self.num_pairs as u32;
        (lo..hi)
            .contains(&token)
            .then(|| (((token - lo) / 2) as usize, ((token - lo) % 2) as usize))
    }

    pub fn partner(&self, token: u32) -> Option<u32> {
        self.pair_of(token).map(|(p, side)| {
            let (a, b) = self.pair_tokens(p);
            if side == 0 {
                b
            } else {
                a
            }
        })
    }

    pub fn is_reserved(&self, token: u32) -> bool {
        token < NUM_RESERVED
    }

    pub fn num_symbols(&self) -> usize {
        self.size() - NUM_RESERVED as usize + self.num_pairs
    }

    /// Unambiguous observation symbol of a transcript token.
    pub fn symbol_of(&self, token: u32) -> u32 {
        debug_assert!(!self.is_reserved(token));
        token - NUM_RESERVED
    }

    pub fn ambiguous_symbol(&self, pair: usize) -> u32 {
        (self.size() - NUM_RESERVED as usize + pair) as u32
    }

    /// The pair a symbol stands for if it is an ambiguous symbol.
    pub fn ambiguous_pair(&self, symbol: u32) -> Option<usize> {
        let first = (self.size() - NUM_RESERVED as usize) as u32;
        (first..first + self.num_pairs as u32)
            .contains(&symbol)
            .then(|| (symbol - first) as usize)
    }

    pub fn symbol_kinds(&self) -> Vec<SymbolKind> {
        let plain = self.size() - NUM_RESERVED as usize;
        let mut kinds = Vec::with_capacity(self.num_symbols());
        for s in 0..plain as u32 {
            kinds.push(match self.pair_of(s + NUM_RESERVED) {
                Some((pair, side)) => SymbolKind::PairMember { pair, side },
                None => SymbolKind::Plain,
            });
        }
        kinds.extend((0..self.num_pairs).map(|pair| SymbolKind::Ambiguous { pair }));
        kinds
    }

    /// Backbone-pretraining stand-in for an observation: the token itself,
    /// or both pair members for an ambiguous symbol.
    pub fn text_proxy(&self, symbol: u32, reference: u32) -> (u32, u32) {
        match self.ambiguous_pair(symbol) {
            Some(p) => self.pair_tokens(p),
            None => (reference, reference),
        }
    }
}
