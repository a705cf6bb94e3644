//! Window planning for stride attention.
//!
//! Query windows start at 0 and advance by the stride while they fit; if the
//! last axis position would be left uncovered, a final window clamped to
//! `length - wnd` is appended. Key/value windows follow the same rule but
//! start at `stride`, which leaves them half a window ahead of their paired
//! query window; when nothing fits this degenerates to the single window at
//! 0. Query window `j` is paired with kv window `min(j, kv_count - 1)`.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WindowPlan {
    pub axis_length: usize,
    pub wnd: usize,
    pub stride: usize,
    pub query_starts: Vec<usize>,
    pub kv_starts: Vec<usize>,
}

fn starts_from(first: usize, length: usize, wnd: usize, stride: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut i = first;
    while i + wnd <= length {
        v.push(i);
        i += stride;
    }
    // Clamped tail so the final positions are covered.
    if v.last().map_or(true, |&last| last + wnd < length) {
        v.push(length - wnd);
    }
    v
}

impl WindowPlan {
    /// Plan with the default stride `max(1, wnd / 2)`.
    pub fn new(axis_length: usize, wnd: usize) -> Result<WindowPlan> {
        WindowPlan::with_stride(axis_length, wnd, (wnd / 2).max(1))
    }

    pub fn with_stride(axis_length: usize, wnd: usize, stride: usize) -> Result<WindowPlan> {
        if wnd == 0 || wnd > axis_length {
            return Err(Error::contract(
                "window_starts",
                format!("wnd {wnd} outside 1..={axis_length}"),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("window_starts", "stride must be positive"));
        }
        Ok(WindowPlan {
            axis_length,
            wnd,
            stride,
            query_starts: starts_from(0, axis_length, wnd, stride),
            kv_starts: starts_from(stride, axis_length, wnd, stride),
        })
    }

    /// Index of the kv window paired with query window `j`.
    pub fn pairing(&self, j: usize) -> usize {
        j.min(self.kv_starts.len() - 1)
    }

    /// How many query windows cover position `pos`.
    pub fn coverage(&self, pos: usize) -> usize {
        self.query_starts
            .iter()
            .filter(|&&s| pos >= s && pos < s + self.wnd)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn enumerated_plans() {
        let p = WindowPlan::new(8, 4).unwrap();
        assert_eq!(p.query_starts, vec![0, 2, 4]);
        assert_eq!(p.kv_starts, vec![2, 4]);

        let p = WindowPlan::new(9, 4).unwrap();
        assert_eq!(p.query_starts, vec![0, 2, 4, 5]);
        assert_eq!(p.kv_starts, vec![2, 4, 5]);

        let p = WindowPlan::new(4, 4).unwrap();
        assert_eq!(p.query_starts, vec![0]);
        assert_eq!(p.kv_starts, vec![0]);
    }

    #[test]
    fn pairing_clamps_to_last_kv_window() {
        let p = WindowPlan::new(9, 4).unwrap();
        assert_eq!(p.pairing(0), 0);
        assert_eq!(p.pairing(3), 2);
    }

    #[test]
    fn oversized_window_is_rejected() {
        assert!(WindowPlan::new(3, 4).is_err());
        assert!(WindowPlan::new(3, 0).is_err());
    }

    proptest! {
        // Union of query windows covers the whole axis, windows fit, and
        // starts strictly increase.
        #[test]
        fn query_windows_cover_axis(length in 1usize..200, wnd_seed in 1usize..200) {
            let wnd = 1 + wnd_seed % length;
            let p = WindowPlan::new(length, wnd).unwrap();
            for s in &p.query_starts {
                prop_assert!(s + wnd <= length);
            }
            for w in p.query_starts.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            for pos in 0..length {
                prop_assert!(p.coverage(pos) >= 1, "position {} uncovered", pos);
            }
            prop_assert!(!p.kv_starts.is_empty());
            for s in &p.kv_starts {
                prop_assert!(s + wnd <= length);
            }
        }
    }
}
