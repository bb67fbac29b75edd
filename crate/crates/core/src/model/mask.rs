use super::ModelGraph;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Keep-flags for the heads and FFN neurons of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    pub heads: Vec<bool>,
    pub neurons: Vec<bool>,
}

impl BlockMask {
    pub fn full(n_heads: usize, n_neurons: usize) -> Self {
        Self {
            heads: vec![true; n_heads],
            neurons: vec![true; n_neurons],
        }
    }

    pub fn kept_heads(&self) -> Vec<usize> {
        kept(&self.heads)
    }

    pub fn kept_neurons(&self) -> Vec<usize> {
        kept(&self.neurons)
    }

    pub fn is_full(&self) -> bool {
        self.heads.iter().all(|&k| k) && self.neurons.iter().all(|&k| k)
    }
}

fn kept(flags: &[bool]) -> Vec<usize> {
    flags
        .iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect()
}

/// Binary structured mask over a transformer plus an optional token schedule.
///
/// `token_counts[i]` is the number of tokens that survive after block `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub blocks: Vec<BlockMask>,
    pub token_counts: Option<Vec<usize>>,
}

impl PruneMask {
    /// Everything kept; inherits any schedule baked into the model.
    pub fn full(model: &ModelGraph) -> Self {
        Self {
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockMask::full(model.n_heads, b.ffn_dim()))
                .collect(),
            token_counts: model.token_schedule.clone(),
        }
    }

    pub fn without_head(mut self, block: usize, head: usize) -> Self {
        self.blocks[block].heads[head] = false;
        self
    }

    pub fn without_neuron(mut self, block: usize, neuron: usize) -> Self {
        self.blocks[block].neurons[neuron] = false;
        self
    }

    pub fn n_kept_heads(&self) -> usize {
        self.blocks.iter().map(|b| b.kept_heads().len()).sum()
    }

    pub fn n_kept_neurons(&self) -> usize {
        self.blocks.iter().map(|b| b.kept_neurons().len()).sum()
    }

    pub fn check(&self, model: &ModelGraph) -> Result<()> {
        if self.blocks.len() != model.n_blocks() {
            return Err(Error::MaskMismatch(format!(
                "{} block masks for {} blocks",
                self.blocks.len(),
                model.n_blocks()
            )));
        }
        for (i, (bm, b)) in self.blocks.iter().zip(&model.blocks).enumerate() {
            if bm.heads.len() != model.n_heads || bm.neurons.len() != b.ffn_dim() {
                return Err(Error::MaskMismatch(format!(
                    "block {i}: mask has {} heads / {} neurons, model has {} / {}",
                    bm.heads.len(),
                    bm.neurons.len(),
                    model.n_heads,
                    b.ffn_dim()
                )));
            }
        }
        if let Some(c) = &self.token_counts {
            check_token_counts(c, model.n_blocks())?;
        }
        Ok(())
    }
}

pub(crate) fn check_token_counts(counts: &[usize], n_blocks: usize) -> Result<()> {
    if counts.len() != n_blocks {
        return Err(Error::MaskMismatch(format!(
            "{} token counts for {n_blocks} blocks",
            counts.len()
        )));
    }
    if counts.contains(&0) {
        return Err(Error::MaskMismatch("token count below 1".into()));
    }
    if counts.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::MaskMismatch(format!(
            "token counts must be non-increasing: {counts:?}"
        )));
    }
    Ok(())
}

/// On-disk form: keep-sets as sorted index lists.
#[derive(Serialize, Deserialize)]
struct MaskJson {
    schema: String,
    blocks: Vec<BlockJson>,
    token_counts: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct BlockJson {
    n_heads: usize,
    n_neurons: usize,
    heads: Vec<usize>,
    neurons: Vec<usize>,
}

pub const MASK_SCHEMA: &str = "trajprune.mask/v1";

impl Serialize for PruneMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskJson {
            schema: MASK_SCHEMA.to_string(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockJson {
                    n_heads: b.heads.len(),
                    n_neurons: b.neurons.len(),
                    heads: b.kept_heads(),
                    neurons: b.kept_neurons(),
                })
                .collect(),
            token_counts: self.token_counts.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PruneMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = MaskJson::deserialize(d)?;
        if raw.schema != MASK_SCHEMA {
            return Err(D::Error::custom(format!(
                "unknown mask schema {:?}",
                raw.schema
            )));
        }
        let mut blocks = Vec::with_capacity(raw.blocks.len());
        for b in raw.blocks {
            let mut heads = vec![false; b.n_heads];
            let mut neurons = vec![false; b.n_neurons];
            for (flags, idx) in [(&mut heads, &b.heads), (&mut neurons, &b.neurons)] {
                for &i in idx {
                    *flags.get_mut(i).ok_or_else(|| {
                        D::Error::custom(format!("mask index {i} out of range"))
                    })? = true;
                }
            }
            blocks.push(BlockMask { heads, neurons });
        }
        Ok(PruneMask {
            blocks,
            token_counts: raw.token_counts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count_rules() {
        assert!(check_token_counts(&[8, 6, 6, 2], 4).is_ok());
        assert!(check_token_counts(&[8, 9], 2).is_err());
        assert!(check_token_counts(&[3, 0], 2).is_err());
        assert!(check_token_counts(&[3], 2).is_err());
    }

    #[test]
    fn json_keeps_index_sets() {
        let m = PruneMask {
            blocks: vec![BlockMask {
                heads: vec![true, false, true],
                neurons: vec![false, true],
            }],
            token_counts: Some(vec![5]),
        };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"heads\":[0,2]"));
        let back: PruneMask = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let bad = s.replace("[0,2]", "[0,7]");
        assert!(serde_json::from_str::<PruneMask>(&bad).is_err());
    }
}
