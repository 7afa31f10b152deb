//! Edge-aware weights against brute-force loops and the m = 1 collapse to
//! plain cross-entropy.

use mrfseg::eal::{sobel_edges, weight_map, EalConfig, EdgeMap, LabelMap};
use mrfseg::tensor::{Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IGNORE: u8 = 255;

fn random_labels(rng: &mut ChaCha8Rng, classes: u8) -> LabelMap {
    let h = rng.gen_range(4..=20);
    let w = rng.gen_range(4..=20);
    // Blocky maps so that edges are sparse enough to leave the clamp range
    // exercised from both ends.
    let cell = rng.gen_range(1..=5);
    let ignore_rate = rng.gen_range(0.0..0.15);
    let cells: Vec<u8> = (0..(h / cell + 1) * (w / cell + 1))
        .map(|_| {
            if rng.gen_bool(ignore_rate) {
                IGNORE
            } else {
                rng.gen_range(0..classes)
            }
        })
        .collect();
    let ids = (0..h * w)
        .map(|p| cells[(p / w / cell) * (w / cell + 1) + (p % w) / cell])
        .collect();
    LabelMap::new(h, w, ids, IGNORE).unwrap()
}

/// Per-pixel Sobel on explicit one-hot planes.
fn oracle_edges(lm: &LabelMap, classes: usize) -> Vec<bool> {
    let (h, w) = (lm.height() as isize, lm.width() as isize);
    let kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
    let ky = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let center = lm.get(y as usize, x as usize);
            if center == IGNORE {
                out.push(false);
                continue;
            }
            let mut edge = false;
            for c in 0..classes as u8 {
                let (mut gx, mut gy) = (0, 0);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let sy = (y + dy).clamp(0, h - 1) as usize;
                        let sx = (x + dx).clamp(0, w - 1) as usize;
                        let mut id = lm.get(sy, sx);
                        if id == IGNORE {
                            id = center;
                        }
                        let v = i32::from(id == c);
                        gx += v * kx[(dy + 1) as usize][(dx + 1) as usize];
                        gy += v * ky[(dy + 1) as usize][(dx + 1) as usize];
                    }
                }
                edge |= gx != 0 || gy != 0;
            }
            out.push(edge);
        }
    }
    out
}

fn oracle_weights(edges: &[bool], lm: &LabelMap, k: usize, m: u32) -> Vec<u32> {
    let (h, w) = (lm.height(), lm.width());
    let r = (k / 2) as isize;
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if lm.get(y as usize, x as usize) == IGNORE {
                out.push(0);
                continue;
            }
            let mut count = 0u32;
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    if yy >= 0
                        && xx >= 0
                        && yy < h as isize
                        && xx < w as isize
                        && edges[yy as usize * w + xx as usize]
                    {
                        count += 1;
                    }
                }
            }
            out.push(count.clamp(1, m));
        }
    }
    out
}

pub fn fifty_maps_match_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let classes = rng.gen_range(2..=5u8);
        let lm = random_labels(&mut rng, classes);
        let expected_edges = oracle_edges(&lm, classes as usize);
        let edges = sobel_edges(&lm, classes as usize).unwrap();
        assert_eq!(edges.edges(), &expected_edges[..], "edges, case {case}");
        for k in [3, 5, 7] {
            for m in [1, 3, 5] {
                let cfg = EalConfig::new(k, m).unwrap();
                let got = weight_map(&edges, &cfg, &lm).unwrap();
                let expected = oracle_weights(&expected_edges, &lm, k, m);
                let got_int: Vec<u32> = got
                    .values()
                    .iter()
                    .map(|&v| {
                        assert_eq!(v.fract(), 0.0);
                        v as u32
                    })
                    .collect();
                assert_eq!(got_int, expected, "case {case} k={k} m={m}");
            }
        }
    }
}

fn naive_ce(logits: &Tensor, labels: &[LabelMap]) -> f64 {
    let [n, c, h, w] = logits.shape().dims();
    let (mut sum, mut count) = (0.0, 0usize);
    for (b, lm) in labels.iter().enumerate().take(n) {
        for y in 0..h {
            for x in 0..w {
                let id = lm.get(y, x);
                if id == IGNORE {
                    continue;
                }
                let z: f64 = (0..c).map(|ch| logits.at(b, ch, y, x).exp()).sum();
                sum += z.ln() - logits.at(b, id as usize, y, x);
                count += 1;
            }
        }
    }
    sum / count as f64
}

pub fn unit_cap_collapses_to_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10 {
        let classes = rng.gen_range(2..=5u8);
        let a = random_labels(&mut rng, classes);
        let ids = (0..a.height() * a.width())
            .map(|_| rng.gen_range(0..classes))
            .collect();
        let b = LabelMap::new(a.height(), a.width(), ids, IGNORE).unwrap();
        let labels = vec![a.clone(), b];
        let x = Tensor::randn(
            Shape::new(2, classes as usize, a.height(), a.width()),
            2.0,
            &mut rng,
        );
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        for k in [3, 5, 7] {
            let eal = tape
                .eal_loss(xv, &labels, &EalConfig::new(k, 1).unwrap())
                .unwrap();
            let ce = tape.softmax_cross_entropy(xv, &labels).unwrap();
            let (eal, ce) = (tape.value(eal).item(), tape.value(ce).item());
            assert!((eal - ce).abs() <= 1e-12, "{eal} vs {ce}");
            assert!((ce - naive_ce(&x, &labels)).abs() <= 1e-12);
        }
    }
}

pub fn adding_an_edge_never_lowers_a_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let lm = random_labels(&mut rng, 3);
        let edges = sobel_edges(&lm, 3).unwrap();
        let cfg = EalConfig::new(5, 3).unwrap();
        let before = weight_map(&edges, &cfg, &lm).unwrap();
        let mut more = EdgeMap::new(lm.height(), lm.width(), edges.edges().to_vec()).unwrap();
        more.set(
            rng.gen_range(0..lm.height()),
            rng.gen_range(0..lm.width()),
            true,
        );
        let after = weight_map(&more, &cfg, &lm).unwrap();
        for (a, b) in after.values().iter().zip(before.values()) {
            assert!(a >= b);
        }
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn fifty_maps_match_brute_force_exactly() {
        super::fifty_maps_match_brute_force_exactly()
    }
    #[test]
    fn unit_cap_collapses_to_cross_entropy() {
        super::unit_cap_collapses_to_cross_entropy()
    }
    #[test]
    fn adding_an_edge_never_lowers_a_weight() {
        super::adding_an_edge_never_lowers_a_weight()
    }
}
