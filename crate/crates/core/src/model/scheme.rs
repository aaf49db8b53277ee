//! Reconstruction constraint schemes: which encoder features each decoder
//! feature is compared against.
//!
//! Decoder layer `i` reconstructs collected encoder layer `i` (shallow to
//! shallow). Loose grouping sums consecutive layers on both sides.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::attention::split_call;
use crate::error::{Error, Result};
use crate::tensor::{Real, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintScheme {
    /// One pair per layer.
    LayerToLayerDense,
    /// Every `every_k`-th layer pair (layers `k-1, 2k-1, ...`).
    LayerToLayerSparse { every_k: usize },
    /// All encoder layers concatenated along channels against a projection
    /// of the last decoder layer.
    LayerToCatLayer,
    /// Consecutive layers summed into `groups` equally sized groups.
    Group { groups: usize },
}

impl Default for ConstraintScheme {
    fn default() -> Self {
        ConstraintScheme::Group { groups: 2 }
    }
}

impl ConstraintScheme {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if layers == 0 {
            return Err(Error::config("a constraint scheme needs at least one layer"));
        }
        match *self {
            ConstraintScheme::LayerToLayerSparse { every_k } => {
                if every_k != 2 && every_k != 4 {
                    return Err(Error::config(format!("sparse scheme supports every_k of 2 or 4, got {every_k}")));
                }
                if every_k > layers {
                    return Err(Error::config(format!("sparse({every_k}) selects no pair out of {layers} layers")));
                }
            }
            ConstraintScheme::Group { groups } => {
                if groups == 0 || layers % groups != 0 {
                    return Err(Error::config(format!(
                        "group({groups}) does not evenly divide {layers} layers"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Decoder/encoder layer indices contributing to each pair, for schemes
    /// that compare like-shaped features.
    pub fn membership(&self, layers: usize) -> Result<Vec<Vec<usize>>> {
        self.validate(layers)?;
        Ok(match *self {
            ConstraintScheme::LayerToLayerDense => (0..layers).map(|i| vec![i]).collect(),
            ConstraintScheme::LayerToLayerSparse { every_k } => {
                (0..layers).filter(|i| (i + 1) % every_k == 0).map(|i| vec![i]).collect()
            }
            ConstraintScheme::LayerToCatLayer => vec![(0..layers).collect()],
            ConstraintScheme::Group { groups } => {
                let per = layers / groups;
                (0..groups).map(|g| (g * per..(g + 1) * per).collect()).collect()
            }
        })
    }
}

impl fmt::Display for ConstraintScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintScheme::LayerToLayerDense => write!(f, "dense"),
            ConstraintScheme::LayerToLayerSparse { every_k } => write!(f, "sparse({every_k})"),
            ConstraintScheme::LayerToCatLayer => write!(f, "cat"),
            ConstraintScheme::Group { groups } => write!(f, "group({groups})"),
        }
    }
}

impl FromStr for ConstraintScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = split_call(s)?;
        match (name, arg) {
            ("dense", None) => Ok(ConstraintScheme::LayerToLayerDense),
            ("sparse", Some(k)) => Ok(ConstraintScheme::LayerToLayerSparse { every_k: k }),
            ("cat", None) => Ok(ConstraintScheme::LayerToCatLayer),
            ("group", Some(g)) if g > 0 => Ok(ConstraintScheme::Group { groups: g }),
            _ => Err(Error::config(format!(
                "unknown scheme '{s}'; expected dense | sparse(k) | cat | group(g)"
            ))),
        }
    }
}

/// Encoder/decoder feature pairs compared by the loss and the anomaly map.
#[derive(Debug, Clone)]
pub struct GroupedFeatures<F> {
    pub pairs: Vec<(TokenGrid<F>, TokenGrid<F>)>,
    /// Set when the decoder side came from a noisy (training-mode) forward.
    pub noise_active: bool,
}

impl<F: Real> GroupedFeatures<F> {
    pub fn new(pairs: Vec<(TokenGrid<F>, TokenGrid<F>)>) -> Result<Self> {
        for (i, (e, d)) in pairs.iter().enumerate() {
            if !e.same_layout(d) {
                return Err(Error::config(format!("pair {i}: encoder and decoder shapes differ")));
            }
        }
        if let Some((first, _)) = pairs.first() {
            if pairs.iter().any(|(e, _)| e.batch() != first.batch() || e.grid_h() != first.grid_h()) {
                return Err(Error::config("pairs disagree on batch or grid size"));
            }
        }
        Ok(Self {
            pairs,
            noise_active: false,
        })
    }

    pub fn group_count(&self) -> usize {
        self.pairs.len()
    }
}

/// Assembles encoder/decoder pairs according to `scheme`.
///
/// For [`ConstraintScheme::LayerToCatLayer`], `decoder_layers` are the
/// channel chunks of the decoder's concatenated projection, which is what
/// [`super::Reconstructor`] produces for that scheme.
pub fn build_groups<F: Real>(
    encoder_layers: &[TokenGrid<F>],
    decoder_layers: &[TokenGrid<F>],
    scheme: ConstraintScheme,
) -> Result<GroupedFeatures<F>> {
    if encoder_layers.len() != decoder_layers.len() {
        return Err(Error::config(format!(
            "{} encoder layers but {} decoder layers",
            encoder_layers.len(),
            decoder_layers.len()
        )));
    }
    let members = scheme.membership(encoder_layers.len())?;
    let gather = |side: &[TokenGrid<F>], idx: &[usize]| -> Result<TokenGrid<F>> {
        let grids: Vec<&TokenGrid<F>> = idx.iter().map(|&i| &side[i]).collect();
        if scheme == ConstraintScheme::LayerToCatLayer {
            TokenGrid::concat_channels(&grids)
        } else {
            TokenGrid::sum_of(&grids)
        }
    };
    let pairs = members
        .iter()
        .map(|idx| Ok((gather(encoder_layers, idx)?, gather(decoder_layers, idx)?)))
        .collect::<Result<Vec<_>>>()?;
    GroupedFeatures::new(pairs)
}

/// Routes per-pair decoder-side gradients (`(rows, channels)`) back to the
/// individual decoder layers. Layers outside every pair get `None`.
pub fn scatter_pair_grads<F: Real>(
    scheme: ConstraintScheme,
    layers: usize,
    layer_dim: usize,
    pair_grads: &[Array2<F>],
) -> Result<Vec<Option<Array2<F>>>> {
    let members = scheme.membership(layers)?;
    if members.len() != pair_grads.len() {
        return Err(Error::config("gradient count does not match the number of pairs"));
    }
    let mut out: Vec<Option<Array2<F>>> = vec![None; layers];
    for (idx, g) in members.iter().zip(pair_grads) {
        for (pos, &layer) in idx.iter().enumerate() {
            let part = if scheme == ConstraintScheme::LayerToCatLayer {
                g.slice(s![.., pos * layer_dim..(pos + 1) * layer_dim]).to_owned()
            } else {
                g.clone()
            };
            match &mut out[layer] {
                Some(acc) => *acc += &part,
                slot => *slot = Some(part),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GridShape;

    fn layer(v: f64) -> TokenGrid<f64> {
        TokenGrid::from_rows(Array2::from_elem((4, 3), v), GridShape::new(1, 2, 2)).unwrap()
    }

    #[test]
    fn parse_round_trip_and_divisibility() {
        for s in ["dense", "sparse(2)", "cat", "group(1)", "group(2)"] {
            assert_eq!(s.parse::<ConstraintScheme>().unwrap().to_string(), s);
        }
        let g3: ConstraintScheme = "group(3)".parse().unwrap();
        assert!(g3.validate(8).is_err());
        assert!("sparse(3)".parse::<ConstraintScheme>().unwrap().validate(8).is_err());
    }

    #[test]
    fn group_one_sums_everything() {
        let enc: Vec<_> = (0..8).map(|_| layer(1.5)).collect();
        let dec: Vec<_> = (0..8).map(|_| layer(-0.5)).collect();
        let g = build_groups(&enc, &dec, ConstraintScheme::Group { groups: 1 }).unwrap();
        assert_eq!(g.group_count(), 1);
        assert!(g.pairs[0].0.data().iter().all(|&v| v == 12.0));
        assert!(g.pairs[0].1.data().iter().all(|&v| v == -4.0));
    }

    #[test]
    fn group_two_splits_low_and_high() {
        let enc: Vec<_> = (0..8).map(|i| layer(1u64.wrapping_shl(i as u32) as f64)).collect();
        let dec = enc.clone();
        let g = build_groups(&enc, &dec, ConstraintScheme::Group { groups: 2 }).unwrap();
        assert_eq!(g.group_count(), 2);
        // bit patterns identify exactly which layers were summed
        assert!(g.pairs[0].0.data().iter().all(|&v| v == 15.0));
        assert!(g.pairs[1].0.data().iter().all(|&v| v == 240.0));
    }

    #[test]
    fn dense_is_a_zip() {
        let enc: Vec<_> = (0..8).map(|i| layer(i as f64)).collect();
        let dec: Vec<_> = (0..8).map(|i| layer(10.0 + i as f64)).collect();
        let g = build_groups(&enc, &dec, ConstraintScheme::LayerToLayerDense).unwrap();
        assert_eq!(g.group_count(), 8);
        for (i, (e, d)) in g.pairs.iter().enumerate() {
            assert_eq!(e, &enc[i]);
            assert_eq!(d, &dec[i]);
        }
    }

    #[test]
    fn sparse_and_cat_shapes() {
        let enc: Vec<_> = (0..8).map(|i| layer(i as f64)).collect();
        let g = build_groups(&enc, &enc, ConstraintScheme::LayerToLayerSparse { every_k: 4 }).unwrap();
        assert_eq!(g.group_count(), 2);
        assert_eq!(g.pairs[1].0, enc[7]);
        let c = build_groups(&enc, &enc, ConstraintScheme::LayerToCatLayer).unwrap();
        assert_eq!(c.group_count(), 1);
        assert_eq!(c.pairs[0].0.dim(), 24);
    }

    #[test]
    fn scatter_inverts_grouping() {
        let g = vec![Array2::from_elem((4, 3), 1.0), Array2::from_elem((4, 3), 2.0)];
        let out = scatter_pair_grads(ConstraintScheme::Group { groups: 2 }, 8, 3, &g).unwrap();
        assert_eq!(out[3].as_ref().unwrap()[[0, 0]], 1.0);
        assert_eq!(out[4].as_ref().unwrap()[[0, 0]], 2.0);
        let sparse = scatter_pair_grads(ConstraintScheme::LayerToLayerSparse { every_k: 4 }, 8, 3, &g).unwrap();
        assert!(sparse[0].is_none() && sparse[3].is_some() && sparse[7].is_some());
        let cat = Array2::from_shape_fn((4, 6), |(_, j)| j as f64);
        let parts = scatter_pair_grads(ConstraintScheme::LayerToCatLayer, 2, 3, &[cat]).unwrap();
        assert_eq!(parts[1].as_ref().unwrap()[[0, 0]], 3.0);
    }

    #[test]
    fn mismatched_lengths_fail() {
        let enc: Vec<_> = (0..8).map(|_| layer(1.0)).collect();
        assert!(build_groups(&enc, &enc[..7], ConstraintScheme::LayerToLayerDense).is_err());
        assert!(build_groups(&enc, &enc, ConstraintScheme::Group { groups: 3 }).is_err());
    }
}
