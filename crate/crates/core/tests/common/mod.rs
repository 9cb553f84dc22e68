//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use chronokit::interpret::{BlockKind, Stage, TraceBlock};
use chronokit::rng::{self, StreamRng};
use chronokit::Tensor;
use chronokit::pooling::SCORE_RESOLUTION;
use rand::Rng;

/// Direct-sum 3D convolution with zero padding, stride and channel groups.
pub fn conv3d_oracle(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    stride: [usize; 3],
    padding: [usize; 3],
    groups: usize,
) -> Tensor {
    let s = x.shape();
    let (nb, cin, ext) = (s[0], s[1], [s[2], s[3], s[4]]);
    let ws = w.shape();
    let (k, cpg, kern) = (ws[0], ws[1], [ws[2], ws[3], ws[4]]);
    let out: Vec<usize> = (0..3).map(|i| (ext[i] + 2 * padding[i] - kern[i]) / stride[i] + 1).collect();
    let kpg = k / groups;
    let mut y = Tensor::zeros(vec![nb, k, out[0], out[1], out[2]]);
    for b in 0..nb {
        for o in 0..k {
            let g = o / kpg;
            for ot in 0..out[0] {
                for oh in 0..out[1] {
                    for ow in 0..out[2] {
                        let mut acc = bias.data()[o];
                        for ci in 0..cpg {
                            let c = g * cpg + ci;
                            assert!(c < cin);
                            for dt in 0..kern[0] {
                                for dh in 0..kern[1] {
                                    for dw in 0..kern[2] {
                                        let it = (ot * stride[0] + dt) as isize - padding[0] as isize;
                                        let ih = (oh * stride[1] + dh) as isize - padding[1] as isize;
                                        let iw = (ow * stride[2] + dw) as isize - padding[2] as isize;
                                        if it < 0 || ih < 0 || iw < 0 {
                                            continue;
                                        }
                                        let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                        if it >= ext[0] || ih >= ext[1] || iw >= ext[2] {
                                            continue;
                                        }
                                        acc += w.get(&[o, ci, dt, dh, dw]) * x.get(&[b, c, it, ih, iw]);
                                    }
                                }
                            }
                        }
                        y.set(&[b, o, ot, oh, ow], acc);
                    }
                }
            }
        }
    }
    y
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(chronokit::pooling::COSINE_EPS)
}

fn combinations(pool: &[usize], n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    if pool.len() < n {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (i, &first) in pool.iter().enumerate() {
        for mut rest in combinations(&pool[i + 1..], n - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Among all `n`-subsets of interior frames, the one with the smallest summed
/// triplet similarity; equal sums go to the lexicographically smallest subset.
pub fn triplet_oracle(frames: &[Vec<f64>], n: usize) -> Vec<usize> {
    let t = frames.len();
    let key = |i: usize| {
        let score = cosine(&frames[i - 1], &frames[i]) + cosine(&frames[i], &frames[i + 1]);
        (score / SCORE_RESOLUTION).round() as i64
    };
    let interior: Vec<usize> = (1..t - 1).collect();
    let mut best: Option<(i64, Vec<usize>)> = None;
    for combo in combinations(&interior, n) {
        let total: i64 = combo.iter().map(|&i| key(i)).sum();
        if best.as_ref().is_none_or(|(s, c)| total < *s || (total == *s && combo < *c)) {
            best = Some((total, combo));
        }
    }
    best.expect("at least one subset").1
}

/// Per batch item: consistency, forward matches, backward matches.
pub fn consistency_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> (bool, Vec<usize>, Vec<usize>) {
    let map = |from: &[Vec<f64>], to: &[Vec<f64>]| -> Vec<usize> {
        from.iter()
            .map(|q| {
                let d: Vec<f64> = to.iter().map(|f| q.iter().zip(f).map(|(x, y)| (x - y).powi(2)).sum()).collect();
                let e: Vec<f64> = d.iter().map(|v| (-v).exp()).collect();
                let z: f64 = e.iter().sum();
                let point: Vec<f64> =
                    (0..q.len()).map(|c| to.iter().zip(&e).map(|(f, w)| w / z * f[c]).sum()).collect();
                let dist: Vec<f64> =
                    to.iter().map(|f| point.iter().zip(f).map(|(x, y)| (x - y).powi(2)).sum()).collect();
                (0..dist.len()).fold(0, |best, i| if dist[i] < dist[best] { i } else { best })
            })
            .collect()
    };
    let fwd = map(a, b);
    let bwd = map(b, a);
    let ok = fwd.iter().enumerate().all(|(t, &i)| t == i) && bwd.iter().enumerate().all(|(t, &i)| t == i);
    (ok, fwd, bwd)
}

/// Class chosen per batch item from activations `[B, C, ...]`, prediction
/// weights `[N, C']` and the remapping `[C, C']`.
pub fn select_class_oracle(a: &Tensor, class_weights: &Tensor, remap: &Tensor) -> Vec<usize> {
    let (nb, c) = (a.dim(0), a.dim(1));
    let (n, cw) = (class_weights.dim(0), class_weights.dim(1));
    let vox = a.len() / (nb * c);
    (0..nb)
        .map(|b| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for k in 0..n {
                let mut s = 0.0;
                for ch in 0..c {
                    let mut m = 0.0;
                    for j in 0..cw {
                        m += remap.get(&[ch, j]) * class_weights.get(&[k, j]);
                    }
                    let mean: f64 = (0..vox).map(|v| a.data()[(b * c + ch) * vox + v]).sum::<f64>() / vox as f64;
                    s += m.max(0.0) * mean;
                }
                if s > best_score {
                    best_score = s;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// A toy network whose strongest connections are planted: each kernel gives
/// weight one to a chosen set of input channels and at most 0.05 elsewhere.
pub struct PlantedNet {
    pub blocks: Vec<TraceBlock>,
    pub head: Tensor,
    pub final_activation: Tensor,
    pub class: usize,
    /// Channel of the last activation planted for the class.
    pub root: usize,
    /// `links[l][k]`: children planted for kernel `k` of back-step layer `l + 1`.
    pub links: Vec<Vec<Vec<usize>>>,
}

fn planted_kernels(r: &mut StreamRng, out: usize, inp: usize, ext: [usize; 3]) -> (Tensor, Vec<Vec<usize>>) {
    let taps: usize = ext.iter().product();
    let mut k = Tensor::from_fn(vec![out, inp, ext[0], ext[1], ext[2]], |_| r.random_range(0.0..0.05));
    let mut links = Vec::with_capacity(out);
    for o in 0..out {
        let count = r.random_range(1..=(inp - 1).min(2));
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < count {
            let j = r.random_range(0..inp);
            if !chosen.contains(&j) {
                chosen.push(j);
            }
        }
        chosen.sort_unstable();
        for &j in &chosen {
            for tap in 0..taps {
                k.data_mut()[(o * inp + j) * taps + tap] = 1.0;
            }
        }
        links.push(chosen);
    }
    (k, links)
}

fn activation(r: &mut StreamRng, channels: usize) -> Tensor {
    let ext = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
    Tensor::from_fn(vec![channels, ext[0], ext[1], ext[2]], |_| r.random_range(0.9..1.1))
}

/// Plain blocks of one to two stages, widths up to 8.
pub fn planted_net(seed: u64) -> PlantedNet {
    let mut r = rng::stream(seed, "planted");
    let nblocks = r.random_range(1..=3);
    let mut width = r.random_range(2..=8);
    let mut blocks = Vec::new();
    let mut stage_links = Vec::new();
    for _ in 0..nblocks {
        let stages = r.random_range(1..=2);
        let mut branch = Vec::new();
        for _ in 0..stages {
            let out = r.random_range(2..=8);
            let ext = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
            let (kernels, links) = planted_kernels(&mut r, out, width, ext);
            branch.push(Stage { kernels, input: activation(&mut r, width) });
            stage_links.push(links);
            width = out;
        }
        blocks.push(TraceBlock { kind: BlockKind::Plain, branches: vec![branch] });
    }
    let classes = r.random_range(2..=4);
    let class = r.random_range(0..classes);
    let root = r.random_range(0..width);
    let mut head = Tensor::from_fn(vec![classes, width], |_| r.random_range(0.0..0.05));
    head.set(&[class, root], 1.0);
    let final_activation = activation(&mut r, width);
    stage_links.reverse();
    PlantedNet { blocks, head, final_activation, class, root, links: stage_links }
}

impl PlantedNet {
    pub fn stages(&self) -> usize {
        self.links.len()
    }

    /// `(layer, parent, child)` edges expected from a feature-wise walk of
    /// `depth` layers, in report order.
    pub fn expected_edges(&self, depth: usize) -> Vec<(usize, usize, usize)> {
        let mut edges = vec![(0, self.class, self.root)];
        let mut parents = vec![self.root];
        for layer in 1..depth.min(self.stages() + 1) {
            let mut next = Vec::new();
            for &p in &parents {
                for &c in &self.links[layer - 1][p] {
                    edges.push((layer, p, c));
                    next.push(c);
                }
            }
            next.sort_unstable();
            next.dedup();
            parents = next;
        }
        edges
    }
}

/// Deterministic stream for test case `i` of a named check.
pub fn case_rng(name: &str, i: usize) -> StreamRng {
    rng::stream(0x5eed, &format!("{name}/{i}"))
}

/// Frames `[C]` per time step, uniform in `[-bound, bound]`.
pub fn random_frames(r: &mut StreamRng, t: usize, c: usize, bound: f64) -> Vec<Vec<f64>> {
    (0..t).map(|_| (0..c).map(|_| r.random_range(-bound..=bound)).collect()).collect()
}

/// Oracle comparisons over `cases` random small instances (extents at most 8).
/// Each returns the number of mismatching cases.
pub mod suites {
    use super::*;
    use chronokit::classreg::{remap_class_weights, select_class};
    use chronokit::interpret::{backstep_traverse, BackstepConfig, TraversalMode};
    use chronokit::pooling::triplet_select;
    use chronokit::srtg::cyclic_consistent;
    use chronokit::tensor::ConvKernel;
    use chronokit::EmbeddingSequence;

    pub fn conv3d(cases: usize) -> usize {
        (0..cases)
            .filter(|&i| {
                let mut g = case_rng("conv3d", i);
                let groups = g.random_range(1..=2);
                let cin = groups * g.random_range(1..=2);
                let k = groups * g.random_range(1..=2);
                let input = [0, 1, 2].map(|_| g.random_range(1..=8));
                let ext = input.map(|n| g.random_range(1..=n.min(3)));
                let stride = [0, 1, 2].map(|_| g.random_range(1..=2));
                let padding = [0, 1, 2].map(|i| g.random_range(0..=ext[i] / 2));
                let nb = g.random_range(1..=2);
                let x = rng::uniform(&mut g, vec![nb, cin, input[0], input[1], input[2]], 1.0);
                let w = rng::uniform(&mut g, vec![k, cin / groups, ext[0], ext[1], ext[2]], 1.0);
                let b = rng::uniform(&mut g, vec![k], 1.0);
                let kernel = ConvKernel::new(w.clone(), b.clone(), stride, padding, groups).expect("valid kernel");
                let y = chronokit::tensor::conv3d(&x, &kernel).expect("valid conv");
                let oracle = conv3d_oracle(&x, &w, &b, stride, padding, groups);
                y.shape() != oracle.shape() || y.max_abs_diff(&oracle) >= 1e-10
            })
            .count()
    }

    pub fn triplet_select_cases(cases: usize) -> usize {
        (0..cases)
            .filter(|&i| {
                let mut g = case_rng("triplet", i);
                let (b, c, t) = (g.random_range(1..=4), g.random_range(1..=8), g.random_range(3..=12));
                let n = g.random_range(1..=t - 2);
                let items: Vec<Vec<Vec<f64>>> = (0..b)
                    .map(|_| {
                        let mut frames = random_frames(&mut g, t, c, 1.0);
                        // repeated frames produce exact score ties
                        if g.random_bool(0.3) {
                            for f in 1..t {
                                if g.random_bool(0.5) {
                                    frames[f] = frames[f - 1].clone();
                                }
                            }
                        }
                        frames
                    })
                    .collect();
                let seq = EmbeddingSequence::from_frames(&items).expect("regular frames");
                let sel = triplet_select(&seq, n as f64 / t as f64).expect("valid selection");
                items.iter().zip(&sel.kept).any(|(frames, kept)| *kept != triplet_oracle(frames, n))
            })
            .count()
    }

    pub fn cyclic_consistency(cases: usize) -> usize {
        (0..cases)
            .filter(|&i| {
                let mut g = case_rng("consistency", i);
                let (b, c, t) = (g.random_range(1..=2), g.random_range(1..=6), g.random_range(1..=8));
                let spread = [0.05, 0.3, 1.0][g.random_range(0..3)];
                let a: Vec<Vec<Vec<f64>>> = (0..b).map(|_| random_frames(&mut g, t, c, 2.0)).collect();
                let other: Vec<Vec<Vec<f64>>> = a
                    .iter()
                    .map(|item| item.iter().map(|f| f.iter().map(|v| v + g.random_range(-spread..=spread)).collect()).collect())
                    .collect();
                let sa = EmbeddingSequence::from_frames(&a).expect("regular frames");
                let sb = EmbeddingSequence::from_frames(&other).expect("regular frames");
                let report = cyclic_consistent(&sa, &sb).expect("matching shapes");
                (0..b).any(|bi| {
                    let (ok, fwd, bwd) = consistency_oracle(&a[bi], &other[bi]);
                    report.consistent[bi] != ok || report.forward[bi] != fwd || report.backward[bi] != bwd
                })
            })
            .count()
    }

    pub fn class_selection(cases: usize) -> usize {
        (0..cases)
            .filter(|&i| {
                let mut g = case_rng("select-class", i);
                let (b, c, cw, n) = (g.random_range(1..=3), g.random_range(1..=8), g.random_range(1..=8), g.random_range(1..=6));
                let ext = [0, 1, 2].map(|_| g.random_range(1..=4));
                let a = rng::uniform(&mut g, vec![b, c, ext[0], ext[1], ext[2]], 1.0);
                let w = rng::uniform(&mut g, vec![n, cw], 1.0);
                let remap = rng::uniform(&mut g, vec![c, cw], 1.0);
                let mapped = remap_class_weights(&w, &remap).expect("matching widths");
                select_class(&a, &mapped).expect("matching channels") != select_class_oracle(&a, &w, &remap)
            })
            .count()
    }

    pub fn planted_backstep(cases: usize) -> usize {
        (0..cases)
            .filter(|&i| {
                let net = planted_net(i as u64);
                let depth = net.stages() + 1;
                let cfg = BackstepConfig::new(0.6, depth, TraversalMode::FeatureWise).expect("valid config");
                let report = backstep_traverse(&net.blocks, &net.head, &net.final_activation, net.class, &cfg)
                    .expect("consistent toy net");
                let got: Vec<(usize, usize, usize)> = report.edges.iter().map(|e| (e.layer, e.parent, e.child)).collect();
                got != net.expected_edges(depth) || report.truncated
            })
            .count()
    }
}
