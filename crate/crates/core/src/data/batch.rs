use numkit::Rng;
use serde::{Deserialize, Serialize};

use super::series::MultivariateSeries;
use crate::backbone::IdMask;
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMode {
    None,
    /// Interleave the variates of neighbouring series.
    #[default]
    Adjacent,
    /// Uniformly random order of all variates in the item.
    Random,
    /// Each variate moves by a truncated-normal index offset.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShuffleConfig {
    pub mode: ShuffleMode,
    pub probability: f64,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        ShuffleConfig {
            mode: ShuffleMode::Adjacent,
            probability: 0.14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub patch_size: usize,
    pub max_variates: usize,
    pub random_offset: bool,
    pub shuffle: ShuffleConfig,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            patch_size: 8,
            max_variates: 32,
            random_offset: true,
            shuffle: ShuffleConfig::default(),
        }
    }
}

/// One packed model input: `M` variates of a common padded length.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub values: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    /// Source series index (into the preprocessed list) per variate.
    pub groups: Vec<usize>,
    pub id_mask: IdMask,
}

impl BatchItem {
    pub fn num_variates(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Left-pads a row with weight-0 zeros to `len`.
fn left_pad(row: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len - row.len()];
    out.extend_from_slice(row);
    out
}

fn permutation(mode: ShuffleMode, groups: &[usize], rng: &mut Rng) -> Vec<usize> {
    let n = groups.len();
    let mut order: Vec<usize> = (0..n).collect();
    match mode {
        ShuffleMode::None => {}
        ShuffleMode::Adjacent => {
            // Round-robin over consecutive series pairs: a0 b0 a1 b1 ...
            let mut series: Vec<Vec<usize>> = Vec::new();
            for (i, g) in groups.iter().enumerate() {
                match series.last_mut() {
                    Some(s) if groups[s[0]] == *g => s.push(i),
                    _ => series.push(vec![i]),
                }
            }
            order.clear();
            for pair in series.chunks(2) {
                let longest = pair.iter().map(Vec::len).max().unwrap_or(0);
                for k in 0..longest {
                    for s in pair {
                        if let Some(&i) = s.get(k) {
                            order.push(i);
                        }
                    }
                }
            }
        }
        ShuffleMode::Random => {
            for i in (1..n).rev() {
                order.swap(i, rng.below(i + 1));
            }
        }
        ShuffleMode::Normal => {
            let mut keys: Vec<(f64, usize)> = (0..n)
                .map(|i| (i as f64 + (2.0 * rng.normal()).clamp(-4.0, 4.0), i))
                .collect();
            keys.sort_by(|a, b| a.0.total_cmp(&b.0));
            order = keys.into_iter().map(|(_, i)| i).collect();
        }
    }
    order
}

/// Pads, offsets, packs and optionally shuffles series into model inputs.
///
/// Series are packed greedily in order into items of at most `max_variates`
/// variates; a series wider than that is split across items. Each item is
/// left-padded to a common length that is a multiple of `patch_size`.
pub fn preprocess_batch(
    series: &[MultivariateSeries],
    cfg: &BatchConfig,
    mut offset_rng: Option<&mut Rng>,
    shuffle_rng: &mut Rng,
) -> Result<Vec<BatchItem>> {
    ensure!(!series.is_empty(), Input, "cannot build a batch from no series");
    ensure!(cfg.patch_size >= 1, Config, "patch_size must be >= 1");
    ensure!(cfg.max_variates >= 1, Config, "max_variates must be >= 1");
    ensure!(
        (0.0..=1.0).contains(&cfg.shuffle.probability),
        Config,
        "shuffle probability must lie in [0, 1]"
    );
    let p = cfg.patch_size;

    // (series index, variate values, variate weights) after the offset.
    let mut rows: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for (si, s) in series.iter().enumerate() {
        s.validate()?;
        let offset = match offset_rng.as_deref_mut() {
            Some(rng) if cfg.random_offset => rng.below(p).min(s.len() - 1),
            _ => 0,
        };
        for (v, w) in s.values.iter().zip(&s.weights) {
            rows.push((si, v[offset..].to_vec(), w[offset..].to_vec()));
        }
    }

    let mut items = Vec::new();
    for chunk in rows.chunks(cfg.max_variates) {
        let longest = chunk.iter().map(|r| r.1.len()).max().unwrap_or(0);
        let len = longest.div_ceil(p) * p;
        let mut groups: Vec<usize> = chunk.iter().map(|r| r.0).collect();
        let mut values: Vec<Vec<f64>> = chunk.iter().map(|r| left_pad(&r.1, len)).collect();
        let mut weights: Vec<Vec<f64>> = chunk.iter().map(|r| left_pad(&r.2, len)).collect();
        let distinct = groups.windows(2).any(|w| w[0] != w[1]);
        if distinct && cfg.shuffle.mode != ShuffleMode::None && shuffle_rng.bernoulli(cfg.shuffle.probability) {
            let order = permutation(cfg.shuffle.mode, &groups, shuffle_rng);
            groups = order.iter().map(|&i| groups[i]).collect();
            values = order.iter().map(|&i| values[i].clone()).collect();
            weights = order.iter().map(|&i| weights[i].clone()).collect();
        }
        let id_mask = IdMask::from_groups(&groups);
        items.push(BatchItem {
            values,
            weights,
            groups,
            id_mask,
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::series::{FreqUnit, Frequency};

    fn series(id: &str, m: usize, len: usize, base: f64) -> MultivariateSeries {
        let values = (0..m)
            .map(|v| (0..len).map(|t| base + v as f64 * 100.0 + t as f64).collect())
            .collect();
        MultivariateSeries::new(id, Frequency::new(FreqUnit::Hour, 1), values).unwrap()
    }

    fn no_shuffle(p: usize) -> BatchConfig {
        BatchConfig {
            patch_size: p,
            random_offset: false,
            shuffle: ShuffleConfig { mode: ShuffleMode::Adjacent, probability: 0.0 },
            ..Default::default()
        }
    }

    #[test]
    fn identity_path_only_pads() {
        let s = series("a", 2, 10, 1.0);
        let items = preprocess_batch(&[s.clone()], &no_shuffle(4), None, &mut Rng::new(0)).unwrap();
        assert_eq!(items.len(), 1);
        let it = &items[0];
        assert_eq!(it.len(), 12);
        for v in 0..2 {
            assert_eq!(&it.values[v][2..], s.values[v].as_slice());
            assert_eq!(&it.weights[v][..2], &[0.0, 0.0]);
            assert!(it.weights[v][2..].iter().all(|w| *w == 1.0));
        }
    }

    #[test]
    fn two_series_make_block_diagonal_mask() {
        let batch = [series("a", 2, 8, 0.0), series("b", 2, 8, 5.0)];
        let it = &preprocess_batch(&batch, &no_shuffle(4), None, &mut Rng::new(0)).unwrap()[0];
        let expect: Vec<bool> = (0..4).flat_map(|i| (0..4).map(move |j| i / 2 == j / 2)).collect();
        assert_eq!(it.id_mask.as_slice(), expect.as_slice());
    }

    #[test]
    fn packing_respects_max_variates() {
        let batch = [series("a", 3, 8, 0.0), series("b", 3, 8, 0.0), series("c", 3, 8, 0.0)];
        let cfg = BatchConfig { max_variates: 4, ..no_shuffle(4) };
        let items = preprocess_batch(&batch, &cfg, None, &mut Rng::new(0)).unwrap();
        assert_eq!(items.iter().map(BatchItem::num_variates).collect::<Vec<_>>(), vec![4, 4, 1]);
        assert_eq!(items[1].groups, vec![1, 1, 2, 2]);
    }

    #[test]
    fn offset_drops_leading_values() {
        let s = series("a", 1, 20, 0.0);
        let cfg = BatchConfig { random_offset: true, ..no_shuffle(8) };
        let mut rng = Rng::new(3);
        let mut expect_rng = Rng::new(3);
        let it = &preprocess_batch(&[s], &cfg, Some(&mut rng), &mut Rng::new(0)).unwrap()[0];
        let o = expect_rng.below(8);
        let kept: f64 = it.weights[0].iter().sum();
        assert_eq!(kept as usize, 20 - o);
        assert_eq!(*it.values[0].last().unwrap(), 19.0);
        assert_eq!(it.len() % 8, 0);
    }

    #[test]
    fn adjacent_shuffle_interleaves_and_keeps_membership() {
        let batch = [series("a", 2, 8, 0.0), series("b", 2, 8, 1000.0)];
        let cfg = BatchConfig {
            shuffle: ShuffleConfig { mode: ShuffleMode::Adjacent, probability: 1.0 },
            ..no_shuffle(4)
        };
        let it = &preprocess_batch(&batch, &cfg, None, &mut Rng::new(0)).unwrap()[0];
        assert_eq!(it.groups, vec![0, 1, 0, 1]);
        assert!(it.id_mask.allowed(0, 2) && !it.id_mask.allowed(0, 1));
        assert_eq!(it.values[1][0], 1000.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(preprocess_batch(&[], &BatchConfig::default(), None, &mut Rng::new(0)).is_err());
    }
}
