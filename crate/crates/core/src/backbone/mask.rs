use numkit::Tensor;

use crate::error::{Error, Result};

/// Additive logit bias for masked-out keys.
pub const MASKED_LOGIT: f64 = -1e30;

/// Square boolean matrix over variates: `allowed(i, j)` iff `i` and `j` share a group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMask {
    size: usize,
    allowed: Vec<bool>,
}

impl IdMask {
    pub fn from_groups(groups: &[usize]) -> Self {
        let size = groups.len();
        let allowed = groups
            .iter()
            .flat_map(|a| groups.iter().map(move |b| a == b))
            .collect();
        IdMask { size, allowed }
    }

    /// Every variate in one group.
    pub fn single_group(size: usize) -> Self {
        Self::from_groups(&vec![0; size])
    }

    /// Row-major matrix; must be symmetric with a true diagonal.
    pub fn from_matrix(size: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != size * size {
            return Err(Error::Input(format!("id mask needs {} entries, got {}", size * size, allowed.len())));
        }
        for i in 0..size {
            if !allowed[i * size + i] {
                return Err(Error::Input(format!("id mask row {i} cannot attend to itself")));
            }
            for j in 0..i {
                if allowed[i * size + j] != allowed[j * size + i] {
                    return Err(Error::Input(format!("id mask is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(IdMask { size, allowed })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// `copies` independent replicas placed block-diagonally.
    pub fn tiled(&self, copies: usize) -> Self {
        let n = self.size * copies;
        let mut allowed = vec![false; n * n];
        for c in 0..copies {
            let off = c * self.size;
            for i in 0..self.size {
                for j in 0..self.size {
                    allowed[(off + i) * n + off + j] = self.allowed(i, j);
                }
            }
        }
        IdMask { size: n, allowed }
    }

    /// Group label per variate (smallest member index of its group).
    pub fn groups(&self) -> Vec<usize> {
        (0..self.size)
            .map(|i| (0..self.size).find(|&j| self.allowed(i, j)).unwrap_or(i))
            .collect()
    }
}

/// `causal[i][j] = j <= i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len).flat_map(|i| (0..len).map(move |j| j <= i)).collect()
}

/// Turns a boolean `size × size` mask into an additive bias tensor.
pub fn mask_bias(mask: &[bool], size: usize) -> Result<Tensor> {
    for (i, row) in mask.chunks(size).enumerate() {
        if !row.iter().any(|v| *v) {
            return Err(Error::Input(format!("attention mask row {i} has no attendable key")));
        }
    }
    let data = mask.iter().map(|m| if *m { 0.0 } else { MASKED_LOGIT }).collect();
    Ok(Tensor::new(data, &[size, size])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_form_blocks() {
        let m = IdMask::from_groups(&[0, 0, 1, 1]);
        assert!(m.allowed(0, 1) && m.allowed(2, 3));
        assert!(!m.allowed(1, 2));
        assert_eq!(m.groups(), vec![0, 0, 2, 2]);
    }

    #[test]
    fn causal_is_lower_triangular() {
        let c = causal_mask(3);
        assert_eq!(c, vec![true, false, false, true, true, false, true, true, true]);
    }

    #[test]
    fn empty_rows_are_rejected() {
        assert!(mask_bias(&[true, false, false, false], 2).is_err());
        assert!(IdMask::from_matrix(2, vec![true, false, false, false]).is_err());
        assert!(IdMask::from_matrix(2, vec![true, true, false, true]).is_err());
    }

    #[test]
    fn tiling_keeps_copies_apart() {
        let m = IdMask::single_group(2).tiled(3);
        assert_eq!(m.size(), 6);
        assert!(m.allowed(2, 3) && !m.allowed(1, 2));
    }
}
