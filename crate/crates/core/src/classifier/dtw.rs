use serde::{Deserialize, Serialize};

use super::ClassifierError;

/// Planar point, meters.
pub type Point2 = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtwParams {
    /// Sakoe-Chiba half-width: cell (i, j) is admissible iff |i - j| <= w.
    pub band_width: Option<usize>,
    /// Divide the accumulated cost by the number of cells on the optimal path.
    pub normalize_by_path_length: bool,
}

impl DtwParams {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.band_width == Some(0) {
            return Err(ClassifierError::InvalidParams(
                "band_width must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[inline]
fn local_cost(p: &Point2, q: &Point2) -> f64 {
    let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
    (dx * dx + dy * dy).sqrt()
}

/// Reusable row buffers so repeated comparisons do not allocate.
#[derive(Debug, Default)]
pub(crate) struct DtwScratch {
    prev: Vec<(f64, u32)>,
    cur: Vec<(f64, u32)>,
}

#[inline]
fn better(a: (f64, u32), b: (f64, u32)) -> (f64, u32) {
    // lower cost, then shorter path
    if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

impl DtwScratch {
    pub(crate) fn distance(
        &mut self,
        a: &[Point2],
        b: &[Point2],
        params: &DtwParams,
    ) -> Result<f64, ClassifierError> {
        Ok(self
            .distance_below(a, b, params, f64::INFINITY)?
            .expect("no cutoff"))
    }

    /// Like `distance`, but gives up with `None` once the result provably
    /// reaches `cutoff`. Accumulated cost never decreases along a path, so a
    /// row whose cheapest cell is already at the cutoff ends the search.
    pub(crate) fn distance_below(
        &mut self,
        a: &[Point2],
        b: &[Point2],
        params: &DtwParams,
        cutoff: f64,
    ) -> Result<Option<f64>, ClassifierError> {
        let (n, m) = (a.len(), b.len());
        if n == 0 || m == 0 {
            return Err(ClassifierError::EmptyTrajectory);
        }
        if let Some(w) = params.band_width {
            if n.abs_diff(m) > w {
                return Err(ClassifierError::InfeasibleBand {
                    band: w,
                    len_a: n,
                    len_b: m,
                });
            }
        }
        // normalized values divide by at most n + m - 1 cells
        let scale = if params.normalize_by_path_length {
            1.0 / (n + m - 1) as f64
        } else {
            1.0
        };
        let reached = |cost: f64| cost * scale >= cutoff;
        let endpoints = if n == 1 && m == 1 {
            local_cost(&a[0], &b[0])
        } else {
            local_cost(&a[0], &b[0]) + local_cost(&a[n - 1], &b[m - 1])
        };
        if reached(endpoints) {
            return Ok(None);
        }
        const UNREACHED: (f64, u32) = (f64::INFINITY, u32::MAX);
        self.prev.clear();
        self.prev.resize(m, UNREACHED);
        self.cur.clear();
        self.cur.resize(m, UNREACHED);

        for (i, pa) in a.iter().enumerate() {
            let (lo, hi) = match params.band_width {
                Some(w) => (i.saturating_sub(w), (i + w).min(m - 1)),
                None => (0, m - 1),
            };
            self.cur.iter_mut().for_each(|c| *c = UNREACHED);
            for j in lo..=hi {
                let cost = local_cost(pa, &b[j]);
                let best = if i == 0 && j == 0 {
                    (0.0, 0)
                } else {
                    let mut best = UNREACHED;
                    if i > 0 {
                        best = better(best, self.prev[j]);
                        if j > 0 {
                            best = better(best, self.prev[j - 1]);
                        }
                    }
                    if j > 0 {
                        best = better(best, self.cur[j - 1]);
                    }
                    best
                };
                self.cur[j] = (best.0 + cost, best.1.saturating_add(1));
            }
            let row_min = self.cur[lo..=hi]
                .iter()
                .fold(f64::INFINITY, |acc, c| acc.min(c.0));
            if reached(row_min) {
                return Ok(None);
            }
            std::mem::swap(&mut self.prev, &mut self.cur);
        }
        let (cost, cells) = self.prev[m - 1];
        let d = if params.normalize_by_path_length {
            cost / f64::from(cells)
        } else {
            cost
        };
        Ok((d < cutoff).then_some(d))
    }
}

/// Minimal accumulated Euclidean cost over monotone warping paths with unit
/// steps right, down and diagonal, both endpoints matched.
pub fn dtw_distance(
    a: &[Point2],
    b: &[Point2],
    params: &DtwParams,
) -> Result<f64, ClassifierError> {
    DtwScratch::default().distance(a, b, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NONE: DtwParams = DtwParams {
        band_width: None,
        normalize_by_path_length: false,
    };

    #[test]
    fn identical_is_zero() {
        let a = [[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]];
        assert_eq!(dtw_distance(&a, &a, &NONE).unwrap(), 0.0);
    }

    #[test]
    fn warping_absorbs_repeats() {
        let a = [[0.0, 0.0], [1.0, 0.0]];
        let b = [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]];
        assert_eq!(dtw_distance(&a, &b, &NONE).unwrap(), 0.0);
    }

    #[test]
    fn single_pair_is_euclidean() {
        assert_eq!(
            dtw_distance(&[[0.0, 0.0]], &[[3.0, 4.0]], &NONE).unwrap(),
            5.0
        );
    }

    #[test]
    fn errors() {
        assert_eq!(
            dtw_distance(&[], &[[0.0, 0.0]], &NONE),
            Err(ClassifierError::EmptyTrajectory)
        );
        let banded = DtwParams {
            band_width: Some(1),
            ..NONE
        };
        let long = [[0.0, 0.0]; 4];
        assert!(matches!(
            dtw_distance(&[[0.0, 0.0]], &long, &banded),
            Err(ClassifierError::InfeasibleBand { .. })
        ));
    }

    #[test]
    fn band_restricts_paths() {
        // the unbanded optimum needs a long horizontal run
        let a = [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [5.0, 0.0]];
        let b = [[0.0, 0.0], [5.0, 0.0], [5.0, 0.0], [5.0, 0.0]];
        let free = dtw_distance(&a, &b, &NONE).unwrap();
        let banded = dtw_distance(
            &a,
            &b,
            &DtwParams {
                band_width: Some(1),
                ..NONE
            },
        )
        .unwrap();
        assert_eq!(free, 0.0);
        assert_eq!(banded, 5.0);
    }

    #[test]
    fn normalized_divides_by_path_cells() {
        let a = [[0.0, 0.0], [1.0, 0.0]];
        let b = [[0.0, 1.0], [1.0, 1.0]];
        let norm = DtwParams {
            normalize_by_path_length: true,
            ..NONE
        };
        // diagonal path, two cells of cost 1
        assert_eq!(dtw_distance(&a, &b, &NONE).unwrap(), 2.0);
        assert_eq!(dtw_distance(&a, &b, &norm).unwrap(), 1.0);
    }

    /// Enumerate every admissible warping path and keep the cheapest.
    fn brute_force(a: &[Point2], b: &[Point2], params: &DtwParams) -> Option<f64> {
        fn walk(
            a: &[Point2],
            b: &[Point2],
            w: Option<usize>,
            i: usize,
            j: usize,
            cost: f64,
            cells: u32,
            best: &mut Vec<(f64, u32)>,
        ) {
            if w.is_some_and(|w| i.abs_diff(j) > w) {
                return;
            }
            let cost = cost + local_cost(&a[i], &b[j]);
            let cells = cells + 1;
            if i + 1 == a.len() && j + 1 == b.len() {
                best.push((cost, cells));
                return;
            }
            if i + 1 < a.len() {
                walk(a, b, w, i + 1, j, cost, cells, best);
            }
            if j + 1 < b.len() {
                walk(a, b, w, i, j + 1, cost, cells, best);
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                walk(a, b, w, i + 1, j + 1, cost, cells, best);
            }
        }
        let mut paths = Vec::new();
        walk(a, b, params.band_width, 0, 0, 0.0, 0, &mut paths);
        let (cost, cells) = paths.into_iter().reduce(better)?;
        Some(if params.normalize_by_path_length {
            cost / f64::from(cells)
        } else {
            cost
        })
    }

    #[test]
    fn matches_brute_force_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for case in 0..200 {
            let traj = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Point2> {
                let n = rng.random_range(1..=6);
                (0..n)
                    .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                    .collect()
            };
            let (a, b) = (traj(&mut rng), traj(&mut rng));
            let params = DtwParams {
                band_width: if case % 2 == 0 {
                    None
                } else {
                    Some(rng.random_range(1..=5))
                },
                normalize_by_path_length: case % 3 == 0,
            };
            match (dtw_distance(&a, &b, &params), brute_force(&a, &b, &params)) {
                (Ok(fast), Some(slow)) => {
                    assert!((fast - slow).abs() <= 1e-9, "case {case}: {fast} vs {slow}")
                }
                (Err(ClassifierError::InfeasibleBand { .. }), None) => {}
                other => panic!("case {case}: {other:?}"),
            }
        }
    }

    #[test]
    fn cutoff_is_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut scratch = DtwScratch::default();
        for case in 0..300 {
            let mut traj = || -> Vec<Point2> {
                let n = rng.random_range(1..=9);
                (0..n)
                    .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                    .collect()
            };
            let (a, b) = (traj(), traj());
            let params = DtwParams {
                band_width: None,
                normalize_by_path_length: case % 2 == 0,
            };
            let full = dtw_distance(&a, &b, &params).unwrap();
            let cutoff = full * [0.5, 0.999, 1.0, 1.001, 2.0][case % 5];
            let pruned = scratch.distance_below(&a, &b, &params, cutoff).unwrap();
            if full < cutoff {
                assert_eq!(pruned, Some(full), "case {case}");
            } else {
                assert_eq!(pruned, None, "case {case}");
            }
        }
    }

    fn arb_traj() -> impl Strategy<Value = Vec<Point2>> {
        proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0).prop_map(|(x, y)| [x, y]), 1..8)
    }

    proptest! {
        #[test]
        fn symmetric_and_nonnegative(a in arb_traj(), b in arb_traj()) {
            let ab = dtw_distance(&a, &b, &NONE).unwrap();
            let ba = dtw_distance(&b, &a, &NONE).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
            prop_assert_eq!(dtw_distance(&a, &a, &NONE).unwrap(), 0.0);
        }

        #[test]
        fn appending_shared_endpoint_keeps_cost(mut a in arb_traj(), mut b in arb_traj()) {
            let p = *a.last().unwrap();
            b.push(p);
            let before = dtw_distance(&a, &b, &NONE).unwrap();
            a.push(p);
            b.push(p);
            let after = dtw_distance(&a, &b, &NONE).unwrap();
            prop_assert!((after - before).abs() <= 1e-12 * (1.0 + before));
        }

        #[test]
        fn band_never_lowers_cost(a in arb_traj(), b in arb_traj(), w in 1usize..8) {
            let banded = DtwParams { band_width: Some(w.max(a.len().abs_diff(b.len()))), ..NONE };
            let free = dtw_distance(&a, &b, &NONE).unwrap();
            prop_assert!(dtw_distance(&a, &b, &banded).unwrap() >= free - 1e-12);
        }
    }
}
