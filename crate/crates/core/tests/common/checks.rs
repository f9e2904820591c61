//! Per-instance oracle and symmetry checks. Each returns the largest deviation
//! between the library and the reference on one random instance.

use super::{matmul, max_abs_diff, random_groups, random_trans, rows, shuffled, uniform};
use psformer::attention::{attend, trans_block_eval};
use psformer::decoder::{scene_context, MCAParams};
use psformer::encoder::EncoderLevelOutput;
use psformer::feature_norm::{fn_apply, group_std, FNParams, FN_EPSILON};
use psformer::io::ply::{heat_color, ply_bytes};
use psformer::io::parse_ply_bytes;
use psformer::pointcloud::farthest_point_sample;
use psformer::train::{e_measure, f_measure, iou, mae};
use psformer::{Graph, PointCloud, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sigma_oracle(centroids: &[Vec<f64>], members: &[Vec<Vec<f64>>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, group) in members.iter().enumerate() {
        for member in group {
            for (c, v) in member.iter().enumerate() {
                sum += (v - centroids[i][c]).powi(2);
                count += 1;
            }
        }
    }
    (sum / count as f64).sqrt()
}

/// `group_std` against the triple loop.
pub fn group_std_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (n, k, d) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5));
    let groups = random_groups(&mut rng, n, k, d);
    let centroids = rows(groups.centroid_features.data(), d);
    let members: Vec<Vec<Vec<f64>>> = groups.neighbor_features.data().chunks(k * d).map(|g| rows(g, d)).collect();
    (group_std(&groups).unwrap() - sigma_oracle(&centroids, &members)).abs()
}

/// `fn_apply` against the direct affine formula; `identity` uses α=1, β=0.
pub fn fn_apply_error(seed: u64, identity: bool) -> f64 {
    let mut rng = rng(seed);
    let (n, k, d) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5));
    let groups = random_groups(&mut rng, n, k, d);
    let centroids = rows(groups.centroid_features.data(), d);
    let members: Vec<Vec<Vec<f64>>> = groups.neighbor_features.data().chunks(k * d).map(|g| rows(g, d)).collect();
    let sigma = sigma_oracle(&centroids, &members);
    let params = if identity {
        FNParams::identity(d)
    } else {
        FNParams {
            alpha: uniform(&mut rng, &[d], 2.0),
            beta: uniform(&mut rng, &[d], 2.0),
            epsilon: FN_EPSILON,
        }
    };
    let out = fn_apply(&groups, &params).unwrap();
    assert_eq!(out.centroid_features, groups.centroid_features);
    let mut expected = Vec::new();
    for (i, group) in members.iter().enumerate() {
        for member in group {
            for c in 0..d {
                let z = (member[c] - centroids[i][c]) / (sigma + FN_EPSILON);
                expected.push(params.alpha.data()[c] * z + params.beta.data()[c]);
            }
        }
    }
    max_abs_diff(out.neighbor_features.data(), &expected)
}

fn attend_oracle(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<f64> {
    let d = k[0].len() as f64;
    let mut out = Vec::new();
    for qi in q {
        let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..v[0].len() {
            out.push(w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum::<f64>() / z);
        }
    }
    out
}

/// `attend` against an explicit exp-and-normalize loop.
pub fn attend_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (s, d) = (rng.random_range(1..7), rng.random_range(1..6));
    let (q, k, v) = (uniform(&mut rng, &[1, s, d], 2.0), uniform(&mut rng, &[1, s, d], 2.0), uniform(&mut rng, &[1, s, d], 2.0));
    let expected = attend_oracle(&rows(q.data(), d), &rows(k.data(), d), &rows(v.data(), d));
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let y = attend(&mut g, qv, kv, vv).unwrap();
    max_abs_diff(g.value(y).data(), &expected)
}

/// The full Trans block against projections, attention, FFN and residual
/// composed by hand.
pub fn trans_block_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (s, d) = (rng.random_range(1..6), rng.random_range(1..9));
    let p = random_trans(&mut rng, d, d);
    let f = uniform(&mut rng, &[s, d], 1.5);
    let fr = rows(f.data(), d);
    let w = |t: &Tensor| rows(t.data(), t.cols());
    let (q, k, v) = (matmul(&fr, &w(&p.w_q)), matmul(&fr, &w(&p.w_k)), matmul(&fr, &w(&p.w_v)));
    let y = rows(&attend_oracle(&q, &k, &v), d);
    let mut h = matmul(&y, &w(&p.ffn_w1));
    for row in &mut h {
        for (x, b) in row.iter_mut().zip(p.ffn_b1.data()) {
            *x = (*x + b).max(0.0);
        }
    }
    let o = matmul(&h, &w(&p.ffn_w2));
    let expected: Vec<f64> = (0..s).flat_map(|i| (0..d).map(|c| fr[i][c] + o[i][c] + p.ffn_b2.data()[c]).collect::<Vec<_>>()).collect();
    max_abs_diff(trans_block_eval(&f, &p).unwrap().data(), &expected)
}

fn random_levels(rng: &mut ChaCha8Rng) -> (Vec<EncoderLevelOutput>, MCAParams<Tensor>) {
    let c = rng.random_range(1..9);
    let widths: Vec<usize> = (0..5).map(|_| rng.random_range(1..6)).collect();
    let levels = widths
        .iter()
        .map(|&d| {
            let m = rng.random_range(1..10);
            EncoderLevelOutput {
                coords: (0..m).map(|_| [rng.random_range(-1.0..1.0), 0.0, 0.0]).collect(),
                features: uniform(rng, &[m, d], 2.0),
            }
        })
        .collect();
    let params = MCAParams {
        weights: widths.iter().map(|&d| uniform(rng, &[d, c], 1.0)).collect(),
        biases: widths.iter().map(|_| uniform(rng, &[c], 0.5)).collect(),
    };
    (levels, params)
}

/// MCA against per-level lift, ReLU and column max.
pub fn mca_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (levels, params) = random_levels(&mut rng);
    let mut expected = Vec::new();
    for (l, level) in levels.iter().enumerate() {
        let (d, c) = (params.weights[l].rows(), params.weights[l].cols());
        let h = matmul(&rows(level.features.data(), d), &rows(params.weights[l].data(), c));
        for j in 0..c {
            let col = h.iter().map(|r| (r[j] + params.biases[l].data()[j]).max(0.0));
            expected.push(col.fold(f64::NEG_INFINITY, f64::max));
        }
    }
    max_abs_diff(&scene_context(&levels, &params).unwrap().vector, &expected)
}

struct Instance {
    p: Vec<f64>,
    labels: Vec<bool>,
    threshold: f64,
}

fn instance(seed: u64) -> Instance {
    let mut rng = rng(seed);
    let n = rng.random_range(1..25);
    let bias = rng.random_range(0.05..0.95);
    Instance {
        p: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        labels: (0..n).map(|_| rng.random_bool(bias)).collect(),
        threshold: rng.random_range(0.05..0.95),
    }
}

/// (tp, fp, fn) counted with explicit comparisons.
fn counts(x: &Instance) -> (f64, f64, f64) {
    let mut c = (0.0, 0.0, 0.0);
    for i in 0..x.p.len() {
        let pred = x.p[i] > x.threshold;
        if pred && x.labels[i] {
            c.0 += 1.0;
        } else if pred {
            c.1 += 1.0;
        } else if x.labels[i] {
            c.2 += 1.0;
        }
    }
    c
}

pub fn mae_error(seed: u64) -> f64 {
    let x = instance(seed);
    let mut s = 0.0;
    for i in 0..x.p.len() {
        s += if x.labels[i] { 1.0 - x.p[i] } else { x.p[i] };
    }
    (mae(&x.p, &x.labels).unwrap() - s / x.p.len() as f64).abs()
}

pub fn f_measure_error(seed: u64) -> f64 {
    let x = instance(seed);
    let (tp, fp, fn_) = counts(&x);
    let expected = if tp + fp + fn_ == 0.0 {
        1.0
    } else if tp == 0.0 {
        0.0
    } else {
        let (p, r) = (tp / (tp + fp), tp / (tp + fn_));
        1.3 * p * r / (0.3 * p + r)
    };
    (f_measure(&x.p, &x.labels, x.threshold).unwrap() - expected).abs()
}

pub fn iou_error(seed: u64) -> f64 {
    let x = instance(seed);
    let (tp, fp, fn_) = counts(&x);
    let expected = if tp + fp + fn_ == 0.0 { 1.0 } else { tp / (tp + fp + fn_) };
    (iou(&x.p, &x.labels, x.threshold).unwrap() - expected).abs()
}

pub fn e_measure_error(seed: u64) -> f64 {
    let x = instance(seed);
    let n = x.p.len() as f64;
    let pred: Vec<f64> = x.p.iter().map(|&v| f64::from(u8::from(v > x.threshold))).collect();
    let gt: Vec<f64> = x.labels.iter().map(|&b| f64::from(u8::from(b))).collect();
    let expected = if gt.iter().all(|&g| g == gt[0]) {
        f64::from(u8::from(pred == gt))
    } else {
        let (mp, mg) = (pred.iter().sum::<f64>() / n, gt.iter().sum::<f64>() / n);
        let mut total = 0.0;
        for i in 0..pred.len() {
            let (a, b) = (pred[i] - mp, gt[i] - mg);
            let xi = 2.0 * a * b / (a * a + b * b + 1e-12);
            total += (1.0 + xi) * (1.0 + xi) / 4.0;
        }
        total / n
    };
    (e_measure(&x.p, &x.labels, x.threshold).unwrap() - expected).abs()
}

fn sorted_points(mut v: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let cols = t.data().len() / perm.len();
    let src = rows(t.data(), cols);
    Tensor::new(t.shape().to_vec(), perm.iter().flat_map(|&i| src[i].clone()).collect()).unwrap()
}

/// 0 when FPS picks the same coordinate set from a shuffled copy, 1 otherwise.
/// `grid` draws integer coordinates so distance ties occur.
pub fn fps_permutation_mismatch(seed: u64, grid: bool) -> f64 {
    let mut rng = rng(seed);
    let n = rng.random_range(2..60);
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let mut p = [0.0; 3];
            for c in &mut p {
                *c = if grid { f64::from(rng.random_range(-3..4)) } else { rng.random_range(-1.0..1.0) };
            }
            p
        })
        .collect();
    let m = rng.random_range(1..=n);
    let perm = shuffled(&mut rng, n);
    let moved: Vec<[f64; 3]> = perm.iter().map(|&i| coords[i]).collect();
    let a = farthest_point_sample(&coords, m).unwrap();
    let b = farthest_point_sample(&moved, m).unwrap();
    let same = sorted_points(a.iter().map(|&i| coords[i]).collect()) == sorted_points(b.iter().map(|&i| moved[i]).collect());
    f64::from(u8::from(!same))
}

/// Deviation of `Trans(P·F)` from `P·Trans(F)`.
pub fn trans_equivariance_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (s, d) = (rng.random_range(2..12), rng.random_range(1..10));
    let p = random_trans(&mut rng, d, d);
    let f = uniform(&mut rng, &[s, d], 1.5);
    let perm = shuffled(&mut rng, s);
    let expected = permute_rows(&trans_block_eval(&f, &p).unwrap(), &perm);
    let got = trans_block_eval(&permute_rows(&f, &perm), &p).unwrap();
    max_abs_diff(got.data(), expected.data())
}

fn segment_max(x: Tensor, valid: &[usize]) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = g.segment_max(v, valid).unwrap();
    g.value(y).data().to_vec()
}

/// Pooling after shuffling valid members and overwriting padded slots with
/// large values, against pooling the original; also against a direct max
/// over the valid members.
pub fn max_pool_symmetry_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (m, k, d) = (rng.random_range(1..6), rng.random_range(2..9), rng.random_range(1..6));
    let x = uniform(&mut rng, &[m, k, d], 2.0);
    let valid: Vec<usize> = (0..m).map(|_| rng.random_range(1..=k)).collect();
    let base = segment_max(x.clone(), &valid);

    let mut moved = x.data().to_vec();
    let mut expected = Vec::new();
    for (gi, &v) in valid.iter().enumerate() {
        let perm = shuffled(&mut rng, v);
        for (slot, &src) in perm.iter().enumerate() {
            for c in 0..d {
                moved[(gi * k + slot) * d + c] = x.data()[(gi * k + src) * d + c];
            }
        }
        for slot in v..k {
            for c in 0..d {
                moved[(gi * k + slot) * d + c] = 10.0 + rng.random_range(0.0..1.0);
            }
        }
        for c in 0..d {
            expected.push((0..v).map(|j| x.data()[(gi * k + j) * d + c]).fold(f64::NEG_INFINITY, f64::max));
        }
    }
    let shuffled_out = segment_max(Tensor::new(vec![m, k, d], moved).unwrap(), &valid);
    max_abs_diff(&shuffled_out, &base).max(max_abs_diff(&base, &expected))
}

/// MCA output after shuffling the rows of every level independently.
pub fn mca_permutation_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (levels, params) = random_levels(&mut rng);
    let moved: Vec<EncoderLevelOutput> = levels
        .iter()
        .map(|l| {
            let perm = shuffled(&mut rng, l.coords.len());
            EncoderLevelOutput {
                coords: perm.iter().map(|&i| l.coords[i]).collect(),
                features: permute_rows(&l.features, &perm),
            }
        })
        .collect();
    let a = scene_context(&levels, &params).unwrap().vector;
    let b = scene_context(&moved, &params).unwrap().vector;
    max_abs_diff(&a, &b)
}

fn random_cloud(rng: &mut ChaCha8Rng, labelled: bool) -> PointCloud {
    let n = rng.random_range(1..40);
    let coords = (0..n).map(|_| [0; 3].map(|_: i32| rng.random_range(-1e3..1e3) * rng.random_range(0.0..1.0f64).powi(8))).collect();
    let colors = (0..n).map(|_| [0; 3].map(|_: i32| f64::from(rng.random_range(0..=255u8)) / 255.0)).collect();
    let labels = labelled.then(|| (0..n).map(|_| rng.random_bool(0.5)).collect());
    PointCloud::new(coords, colors, labels).unwrap()
}

/// Writes a random cloud and reads it back; `Err` describes the first mismatch.
pub fn ply_round_trip(seed: u64, binary: bool, labelled: bool, with_p: bool) -> Result<(), String> {
    let mut rng = rng(seed);
    let mut cloud = random_cloud(&mut rng, labelled);
    let p: Vec<f64> = (0..cloud.len()).map(|_| rng.random_range(0.0..1.0)).collect();
    let bytes = ply_bytes(&cloud, with_p.then_some(&p[..]), binary).map_err(|e| e.to_string())?;
    let back = parse_ply_bytes(&bytes, "round-trip").map_err(|e| e.to_string())?;
    if with_p {
        // probabilities replace the colors with the heat ramp
        cloud.colors = p.iter().map(|&v| heat_color(v).map(|c| f64::from(c) / 255.0)).collect();
    }
    if back.cloud != cloud {
        return Err(format!("cloud differs (seed {seed}, binary {binary})"));
    }
    // saliency is stored as float32
    let expected = with_p.then(|| p.iter().map(|&v| f64::from(v as f32)).collect::<Vec<_>>());
    if back.saliency != expected {
        return Err(format!("saliency differs (seed {seed}, binary {binary})"));
    }
    Ok(())
}

/// A valid PLY with a few random edits concentrated in the header.
pub fn mutated_ply(seed: u64) -> Vec<u8> {
    const TOKENS: [&[u8]; 12] = [
        b"element vertex 4294967296\n",
        b"element face 99999999999\n",
        b"property list uchar int vertex_indices\n",
        b"property double x\n",
        b"property uchar red\n",
        b"format binary_big_endian 1.0\n",
        b"property list int double junk\n",
        b"element empty 18446744073709551615\n",
        b"comment \xff\xfe\n",
        b"-1",
        b"\n",
        b"end_header\n",
    ];
    let mut rng = rng(seed);
    let cloud = random_cloud(&mut rng, true);
    let mut bytes = ply_bytes(&cloud, None, rng.random_bool(0.5)).unwrap();
    let header_end = bytes.windows(10).position(|w| w == b"end_header").unwrap() + 11;
    for _ in 0..rng.random_range(1..6) {
        let at = rng.random_range(0..=header_end.min(bytes.len()));
        match rng.random_range(0..4) {
            0 => bytes.splice(at..at, TOKENS[rng.random_range(0..TOKENS.len())].iter().copied()).for_each(drop),
            1 if at < bytes.len() => bytes[at] = rng.random(),
            2 if at < bytes.len() => {
                bytes.remove(at);
            }
            _ => bytes.truncate(rng.random_range(0..=bytes.len())),
        }
    }
    bytes
}
