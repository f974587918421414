//! Point cloud embedder: farthest point sampling, k-nearest-neighbor
//! grouping, and a mini point network (shared per-point MLP, max pool per
//! group, linear to model width).

use alloc::vec;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{config_err, degenerate_err, Result};
use crate::nn::Linear;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tokenize::TokenSequence;

#[derive(Debug, Clone)]
pub struct PointCloud {
    /// P_pts x 3 coordinates.
    pub points: Array<f64>,
}

impl PointCloud {
    pub fn new(points: Array<f64>) -> Result<Self> {
        if points.cols() != 3 || points.rows() == 0 {
            return Err(degenerate_err!(
                "point cloud must be non-empty n x 3, got {:?}",
                points.shape()
            ));
        }
        if !points.all_finite() {
            return Err(degenerate_err!("point cloud has non-finite coordinates"));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Uniform resample with replacement to exactly `target` points, used
    /// when a cloud is smaller than g or g*k.
    pub fn resample_with_replacement(&self, target: usize, rng: &mut Rng) -> PointCloud {
        let mut data = Vec::with_capacity(target * 3);
        for _ in 0..target {
            let i = rng.below(self.len());
            data.extend_from_slice(&self.points.data()[i * 3..i * 3 + 3]);
        }
        PointCloud {
            points: Array::from_vec(target, 3, data).expect("shape"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupedPointPatches {
    /// g x 3 group centers (copies of input points).
    pub centers: Array<f64>,
    /// (g*k) x 3 center-subtracted local coordinates, groups contiguous.
    pub groups: Array<f64>,
    pub g: usize,
    pub k: usize,
}

fn dist2(points: &Array<f64>, a: usize, b: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..3 {
        let d = points.at(a, c) - points.at(b, c);
        acc += d * d;
    }
    acc
}

/// Farthest point sampling. Incremental O(g*P): carry each point's distance
/// to the selected set, refresh against the newest center, take the argmax.
/// Ties go to the lowest index.
pub fn fps(pc: &PointCloud, g: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if g > n {
        return Err(degenerate_err!("fps asked for {g} centers from {n} points"));
    }
    if start_index >= n {
        return Err(config_err!("fps start index {start_index} out of {n}"));
    }
    if g == 0 {
        return Err(config_err!("fps needs g >= 1"));
    }
    let mut chosen = Vec::with_capacity(g);
    let mut taken = vec![false; n];
    let mut best_d = vec![f64::INFINITY; n];
    chosen.push(start_index);
    taken[start_index] = true;
    while chosen.len() < g {
        let newest = *chosen.last().expect("non-empty");
        let mut next = (usize::MAX, f64::NEG_INFINITY);
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(&pc.points, i, newest);
            if d < best_d[i] {
                best_d[i] = d;
            }
            if best_d[i] > next.1 {
                next = (i, best_d[i]);
            }
        }
        chosen.push(next.0);
        taken[next.0] = true;
    }
    Ok(chosen)
}

/// Group the k nearest neighbors of every center and subtract the center
/// from each group. Ties break toward the lower point index.
pub fn knn_group(pc: &PointCloud, centers: &[usize], k: usize) -> Result<GroupedPointPatches> {
    let n = pc.len();
    if k > n {
        return Err(degenerate_err!("knn asked for {k} neighbors from {n} points"));
    }
    if k == 0 || centers.is_empty() {
        return Err(config_err!("knn needs k >= 1 and at least one center"));
    }
    let g = centers.len();
    let mut centers_arr = Array::zeros(g, 3);
    let mut groups = Array::zeros(g * k, 3);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for (gi, &ci) in centers.iter().enumerate() {
        if ci >= n {
            return Err(config_err!("center index {ci} out of {n}"));
        }
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| {
            let da = dist2(&pc.points, ci, a);
            let db = dist2(&pc.points, ci, b);
            da.partial_cmp(&db)
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        for c in 0..3 {
            *centers_arr.at_mut(gi, c) = pc.points.at(ci, c);
        }
        for (slot, &pi) in order[..k].iter().enumerate() {
            for c in 0..3 {
                *groups.at_mut(gi * k + slot, c) = pc.points.at(pi, c) - pc.points.at(ci, c);
            }
        }
    }
    Ok(GroupedPointPatches {
        centers: centers_arr,
        groups,
        g,
        k,
    })
}

/// Per-point shared MLP, max pool per group, then linear to width d.
#[derive(Debug, Clone)]
pub struct MiniPointNet {
    pub fc1: Linear,
    pub fc2: Linear,
    pub proj: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct MiniPointNetConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub d: usize,
}

impl MiniPointNet {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        cfg: MiniPointNetConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(MiniPointNet {
            fc1: Linear::new(store, &alloc::format!("{prefix}.fc1"), 3, cfg.hidden1, rng)?,
            fc2: Linear::new(
                store,
                &alloc::format!("{prefix}.fc2"),
                cfg.hidden1,
                cfg.hidden2,
                rng,
            )?,
            proj: Linear::new(
                store,
                &alloc::format!("{prefix}.proj"),
                cfg.hidden2,
                cfg.d,
                rng,
            )?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        patches: &GroupedPointPatches,
    ) -> Result<TokenSequence> {
        let flat = tape.constant(patches.groups.cast::<S>());
        let h = self.fc1.forward(tape, store, flat)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let pooled = tape.max_pool_rows(h, patches.k)?;
        let tokens = self.proj.forward(tape, store, pooled)?;
        Ok(TokenSequence::new(tape, tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{fps_brute_force, knn_brute_force};
    use crate::param::Decay;

    fn cloud(coords: &[f64]) -> PointCloud {
        PointCloud::new(Array::from_vec(coords.len() / 3, 3, coords.to_vec()).unwrap()).unwrap()
    }

    fn random_cloud(n: usize, rng: &mut Rng) -> PointCloud {
        let data: Vec<f64> = (0..n * 3).map(|_| rng.normal_f64()).collect();
        PointCloud::new(Array::from_vec(n, 3, data).unwrap()).unwrap()
    }

    #[test]
    fn fps_picks_the_unique_farthest_point() {
        let pc = cloud(&[0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 5.0, 0.0, 0.0]);
        assert_eq!(fps(&pc, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fps_exhaustion_is_a_permutation() {
        let mut rng = Rng::from_seed(1);
        let pc = random_cloud(17, &mut rng);
        let mut idx = fps(&pc, 17, 0).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn fps_matches_brute_force_on_random_instances() {
        let mut rng = Rng::from_seed(99);
        for trial in 0..100 {
            let n = 4 + (rng.below(61));
            let pc = random_cloud(n, &mut rng);
            let g = 1 + (rng.below(n));
            let start = rng.below(n);
            let got = fps(&pc, g, start).unwrap();
            let want = fps_brute_force(&pc.points, g, start);
            assert_eq!(got, want, "trial {trial}: n={n} g={g} start={start}");
        }
    }

    #[test]
    fn fps_rejects_oversampling() {
        let pc = cloud(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(fps(&pc, 3, 0).is_err());
    }

    #[test]
    fn knn_self_neighbor_is_the_zero_vector() {
        let pc = cloud(&[1.0, 2.0, 3.0, 5.0, 5.0, 5.0]);
        let patches = knn_group(&pc, &[0], 1).unwrap();
        assert_eq!(patches.groups.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(patches.centers.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn knn_collinear_midpoint_takes_both_endpoints() {
        // Center at x=5; nearest two among {0, 4, 6, 20} are 4 and 6.
        let pc = cloud(&[
            0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 6.0, 0.0, 0.0, 20.0, 0.0, 0.0, 5.0, 0.0, 0.0,
        ]);
        let patches = knn_group(&pc, &[4], 3).unwrap();
        // Nearest: itself (0), then 4 and 6 at distance 1 each (index order).
        assert_eq!(patches.groups.data()[0..3], [0.0, 0.0, 0.0]);
        assert_eq!(patches.groups.data()[3..6], [-1.0, 0.0, 0.0]);
        assert_eq!(patches.groups.data()[6..9], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn knn_matches_brute_force_on_random_instances() {
        let mut rng = Rng::from_seed(1234);
        for trial in 0..100 {
            let n = 2 + (rng.below(63));
            let pc = random_cloud(n, &mut rng);
            let k = 1 + (rng.below(n));
            let center = rng.below(n);
            let patches = knn_group(&pc, &[center], k).unwrap();
            let want = knn_brute_force(&pc.points, center, k);
            for (slot, &pi) in want.iter().enumerate() {
                for c in 0..3 {
                    let local = pc.points.at(pi, c) - pc.points.at(center, c);
                    assert_eq!(
                        patches.groups.at(slot, c),
                        local,
                        "trial {trial} slot {slot}"
                    );
                }
            }
        }
    }

    #[test]
    fn group_plus_center_recovers_original_points() {
        let mut rng = Rng::from_seed(7);
        let pc = random_cloud(32, &mut rng);
        let centers = fps(&pc, 4, 0).unwrap();
        let patches = knn_group(&pc, &centers, 5).unwrap();
        for gi in 0..4 {
            for slot in 0..5 {
                let restored: Vec<f64> = (0..3)
                    .map(|c| patches.groups.at(gi * 5 + slot, c) + patches.centers.at(gi, c))
                    .collect();
                let found = (0..32).any(|pi| {
                    (0..3).all(|c| (pc.points.at(pi, c) - restored[c]).abs() < 1e-12)
                });
                assert!(found, "group {gi} slot {slot} not in original cloud");
            }
        }
    }

    #[test]
    fn mini_pointnet_constant_input_gives_identical_tokens() {
        let mut rng = Rng::from_seed(3);
        let mut store: ParamStore<f64> = ParamStore::new();
        let net = MiniPointNet::new(
            &mut store,
            "pn",
            MiniPointNetConfig {
                hidden1: 8,
                hidden2: 8,
                d: 6,
            },
            &mut rng,
        )
        .unwrap();
        let patches = GroupedPointPatches {
            centers: Array::zeros(3, 3),
            groups: Array::zeros(12, 3),
            g: 3,
            k: 4,
        };
        let mut tape: Tape<f64> = Tape::new();
        let seq = net.forward(&mut tape, &store, &patches).unwrap();
        assert_eq!((seq.m, seq.d), (3, 6));
        let v = tape.value(seq.node);
        for r in 1..3 {
            assert_eq!(v.row_slice(0), v.row_slice(r));
        }
    }

    #[test]
    fn mini_pointnet_is_permutation_invariant_within_groups() {
        let mut rng = Rng::from_seed(5);
        let mut store: ParamStore<f64> = ParamStore::new();
        let net = MiniPointNet::new(
            &mut store,
            "pn",
            MiniPointNetConfig {
                hidden1: 8,
                hidden2: 8,
                d: 6,
            },
            &mut rng,
        )
        .unwrap();
        let base: Vec<f64> = (0..4 * 3).map(|_| rng.normal_f64()).collect();
        let mut permuted = base.clone();
        permuted.rotate_left(3); // move point 0 to the end
        let run = |coords: Vec<f64>, store: &ParamStore<f64>| {
            let patches = GroupedPointPatches {
                centers: Array::zeros(1, 3),
                groups: Array::from_vec(4, 3, coords).unwrap(),
                g: 1,
                k: 4,
            };
            let mut tape: Tape<f64> = Tape::new();
            let seq = net.forward(&mut tape, store, &patches).unwrap();
            tape.value(seq.node).data().to_vec()
        };
        assert_eq!(run(base, &store), run(permuted, &store));
    }

    #[test]
    fn mini_pointnet_matches_explicit_loop_micro_case() {
        // g=2, k=3 with hand-run per-point MLP + elementwise max.
        let mut rng = Rng::from_seed(17);
        let mut store: ParamStore<f64> = ParamStore::new();
        let net = MiniPointNet::new(
            &mut store,
            "pn",
            MiniPointNetConfig {
                hidden1: 4,
                hidden2: 5,
                d: 2,
            },
            &mut rng,
        )
        .unwrap();
        let coords: Vec<f64> = (0..18).map(|_| rng.normal_f64()).collect();
        let patches = GroupedPointPatches {
            centers: Array::zeros(2, 3),
            groups: Array::from_vec(6, 3, coords.clone()).unwrap(),
            g: 2,
            k: 3,
        };
        let mut tape: Tape<f64> = Tape::new();
        let seq = net.forward(&mut tape, &store, &patches).unwrap();
        let got = tape.value(seq.node);

        // Oracle: loop over points, two-layer MLP with gelu, running max,
        // then the final projection.
        let w = |l: &Linear| store.get(l.w).value.clone();
        let b = |l: &Linear| store.get(l.b).value.clone();
        let gelu = |x: f64| {
            let inner = 0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x);
            0.5 * x * (1.0 + libm::tanh(inner))
        };
        for gi in 0..2 {
            let mut pooled = vec![f64::NEG_INFINITY; 5];
            for pt in 0..3 {
                let p = &coords[(gi * 3 + pt) * 3..(gi * 3 + pt) * 3 + 3];
                let mut h1 = vec![0.0; 4];
                for j in 0..4 {
                    let mut acc = b(&net.fc1).at(0, j);
                    for c in 0..3 {
                        acc += p[c] * w(&net.fc1).at(c, j);
                    }
                    h1[j] = gelu(acc);
                }
                let mut h2 = vec![0.0; 5];
                for j in 0..5 {
                    let mut acc = b(&net.fc2).at(0, j);
                    for c in 0..4 {
                        acc += h1[c] * w(&net.fc2).at(c, j);
                    }
                    h2[j] = gelu(acc);
                    if h2[j] > pooled[j] {
                        pooled[j] = h2[j];
                    }
                }
            }
            for j in 0..2 {
                let mut acc = b(&net.proj).at(0, j);
                for c in 0..5 {
                    acc += pooled[c] * w(&net.proj).at(c, j);
                }
                assert!((got.at(gi, j) - acc).abs() < 1e-12, "group {gi} dim {j}");
            }
        }
    }

    #[test]
    fn resample_with_replacement_hits_target_count() {
        let mut rng = Rng::from_seed(2);
        let pc = cloud(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let big = pc.resample_with_replacement(10, &mut rng);
        assert_eq!(big.len(), 10);
        for i in 0..10 {
            let x = big.points.at(i, 0);
            assert!(x == 0.0 || x == 1.0);
        }
    }

    #[test]
    fn tokens_flow_gradients_into_pointnet_params() {
        let mut rng = Rng::from_seed(8);
        let mut store: ParamStore<f64> = ParamStore::new();
        let net = MiniPointNet::new(
            &mut store,
            "pn",
            MiniPointNetConfig {
                hidden1: 4,
                hidden2: 4,
                d: 3,
            },
            &mut rng,
        )
        .unwrap();
        let _marker = store
            .register("unused", Array::zeros(1, 1), Decay::Apply)
            .unwrap();
        let patches = GroupedPointPatches {
            centers: Array::zeros(1, 3),
            groups: Array::trunc_normal(3, 3, 1.0, &mut rng),
            g: 1,
            k: 3,
        };
        let mut tape: Tape<f64> = Tape::new();
        let seq = net.forward(&mut tape, &store, &patches).unwrap();
        let loss = tape.sum_all(seq.node);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut store);
        let g_proj = store.get(net.proj.w).grad.data();
        assert!(g_proj.iter().any(|&g| g != 0.0));
    }
}
