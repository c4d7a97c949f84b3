use super::TokenizationError;

/// One flag per byte; `true` means a patch ends at that byte.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct BoundaryMask {
    pub flags: Vec<bool>,
}

impl BoundaryMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    /// Mask with patches ending exactly at `ends` (positions must be `< len`).
    pub fn from_ends(len: usize, ends: &[usize]) -> Self {
        let mut flags = vec![false; len];
        for &e in ends {
            flags[e] = true;
        }
        Self { flags }
    }

    /// Mask for consecutive patches of the given byte lengths.
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut flags = Vec::with_capacity(lengths.iter().sum());
        for &l in lengths {
            flags.extend(std::iter::repeat(false).take(l.saturating_sub(1)));
            flags.push(true);
        }
        Self { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Positions of the true flags, ascending.
    pub fn ends(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    /// Byte lengths of the patches; a trailing run without a closing flag is
    /// counted as an (open) final patch.
    pub fn patch_lengths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut run = 0;
        for &f in &self.flags {
            run += 1;
            if f {
                out.push(run);
                run = 0;
            }
        }
        if run > 0 {
            out.push(run);
        }
        out
    }

    /// True positions of `self` are a subset of those of `other`.
    pub fn is_subset_of(&self, other: &BoundaryMask) -> bool {
        self.flags.len() == other.flags.len()
            && self.flags.iter().zip(&other.flags).all(|(&a, &b)| !a || b)
    }

    /// Run-length encoding: the first run counts `false` flags, then runs
    /// alternate. Written as space-separated decimals.
    pub fn to_rle(&self) -> String {
        let mut runs = Vec::new();
        let mut cur = false;
        let mut n = 0usize;
        for &f in &self.flags {
            if f == cur {
                n += 1;
            } else {
                runs.push(n);
                cur = f;
                n = 1;
            }
        }
        runs.push(n);
        runs.iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_rle(s: &str) -> Result<Self, TokenizationError> {
        let mut flags = Vec::new();
        let mut cur = false;
        for tok in s.split_whitespace() {
            let n: usize = tok
                .parse()
                .map_err(|_| TokenizationError::BadMask(format!("not a count: {tok}")))?;
            flags.extend(std::iter::repeat(cur).take(n));
            cur = !cur;
        }
        Ok(Self { flags })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_round_trip() {
        let m = BoundaryMask::new(vec![true, false, false, true, true, false]);
        assert_eq!(m.to_rle(), "0 1 2 2 1");
        assert_eq!(BoundaryMask::from_rle(&m.to_rle()).unwrap(), m);
        let e = BoundaryMask::default();
        assert_eq!(BoundaryMask::from_rle(&e.to_rle()).unwrap(), e);
    }

    #[test]
    fn lengths_and_ends() {
        let m = BoundaryMask::from_lengths(&[2, 1, 3]);
        assert_eq!(m.flags, vec![false, true, true, false, false, true]);
        assert_eq!(m.ends(), vec![1, 2, 5]);
        assert_eq!(m.patch_lengths(), vec![2, 1, 3]);
    }
}
