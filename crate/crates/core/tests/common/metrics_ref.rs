#![allow(dead_code)]

//! Brute-force metric references written against plain 2-D grids, plus a
//! set of small fixtures built from painted rectangles.

use dpn_core::tensor::LabelMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RefReport {
    pub miou: f64,
    pub ta: f64,
    pub la: f64,
    pub ba: f64,
}

type Grid = Vec<Vec<bool>>;

fn grid(map: &LabelMap, gt: &LabelMap, c: usize, ignore: Option<usize>) -> Grid {
    (0..map.height())
        .map(|y| {
            (0..map.width())
                .map(|x| map.get(y, x) == c && Some(gt.get(y, x)) != ignore)
                .collect()
        })
        .collect()
}

fn find(parent: &mut Vec<usize>, i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    parent[i] = r;
    r
}

/// Boxes `(y0, x0, y1, x1)` of 4-connected components via union-find,
/// ordered by each component's first raster pixel.
fn boxes(g: &Grid) -> Vec<(usize, usize, usize, usize)> {
    let (h, w) = (g.len(), g[0].len());
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            if !g[y][x] {
                continue;
            }
            if x + 1 < w && g[y][x + 1] {
                let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, y * w + x + 1));
                parent[a.max(b)] = a.min(b);
            }
            if y + 1 < h && g[y + 1][x] {
                let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, (y + 1) * w + x));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut roots: Vec<usize> = Vec::new();
    let mut out: Vec<(usize, usize, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !g[y][x] {
                continue;
            }
            let r = find(&mut parent, y * w + x);
            match roots.iter().position(|&q| q == r) {
                Some(k) => {
                    let b = &mut out[k];
                    *b = (b.0.min(y), b.1.min(x), b.2.max(y), b.3.max(x));
                }
                None => {
                    roots.push(r);
                    out.push((y, x, y, x));
                }
            }
        }
    }
    out
}

fn box_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for y in a.0.min(b.0)..=a.2.max(b.2) {
        for x in a.1.min(b.1)..=a.3.max(b.3) {
            let ia = y >= a.0 && y <= a.2 && x >= a.1 && x <= a.3;
            let ib = y >= b.0 && y <= b.2 && x >= b.1 && x <= b.3;
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

/// Greedy matching: repeatedly take the best remaining overlapping pair.
fn greedy(p: &[(usize, usize, usize, usize)], g: &[(usize, usize, usize, usize)]) -> Vec<f64> {
    let mut up = vec![false; p.len()];
    let mut ug = vec![false; g.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..p.len() {
            for j in 0..g.len() {
                if up[i] || ug[j] {
                    continue;
                }
                let v = box_iou(p[i], g[j]);
                if v > 0.0 && best.map_or(true, |b| v > b.0) {
                    best = Some((v, i, j));
                }
            }
        }
        match best {
            Some((v, i, j)) => {
                up[i] = true;
                ug[j] = true;
                out.push(v);
            }
            None => return out,
        }
    }
}

fn edge(g: &Grid) -> Vec<(usize, usize)> {
    let (h, w) = (g.len() as i64, g[0].len() as i64);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !g[y as usize][x as usize] {
                continue;
            }
            let outside = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| {
                let (yy, xx) = (y + dy, x + dx);
                yy >= 0 && xx >= 0 && yy < h && xx < w && !g[yy as usize][xx as usize]
            });
            if outside {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn bf1(p: &Grid, g: &Grid, tau: usize) -> f64 {
    let (pe, ge) = (edge(p), edge(g));
    if pe.is_empty() && ge.is_empty() {
        return 1.0;
    }
    if pe.is_empty() || ge.is_empty() {
        return 0.0;
    }
    let near = |a: (usize, usize), set: &[(usize, usize)]| {
        set.iter().any(|b| a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) <= tau)
    };
    let prec = pe.iter().filter(|&&a| near(a, &ge)).count() as f64 / pe.len() as f64;
    let rec = ge.iter().filter(|&&a| near(a, &pe)).count() as f64 / ge.len() as f64;
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

fn mean(v: &[Option<f64>]) -> f64 {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    if d.is_empty() {
        0.0
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    }
}

pub fn reference_eval(pairs: &[(LabelMap, LabelMap)], l: usize, ignore: Option<usize>, tau: usize) -> RefReport {
    let mut inter = vec![0u64; l];
    let mut union = vec![0u64; l];
    let mut ta = 0.0;
    let mut la_sum = vec![(0.0, 0); l];
    let mut ba_sum = vec![(0.0, 0); l];
    for (pred, gt) in pairs {
        let (h, w) = (gt.height(), gt.width());
        let mut valid = 0usize;
        let mut hp = vec![0usize; l];
        let mut hg = vec![0usize; l];
        for y in 0..h {
            for x in 0..w {
                let (p, g) = (pred.get(y, x), gt.get(y, x));
                if Some(g) == ignore {
                    continue;
                }
                valid += 1;
                hp[p] += 1;
                hg[g] += 1;
                for c in 0..l {
                    inter[c] += (p == c && g == c) as u64;
                    union[c] += (p == c || g == c) as u64;
                }
            }
        }
        let tag = |n: usize| n > 0 && (n as f64) >= 0.001 * valid as f64;
        ta += (0..l).filter(|&c| tag(hp[c]) == tag(hg[c])).count() as f64 / l as f64;
        for c in 0..l {
            let (pg, gg) = (grid(pred, gt, c, ignore), grid(gt, gt, c, ignore));
            let gb = boxes(&gg);
            if gb.is_empty() {
                continue;
            }
            let pb = boxes(&pg);
            let m = greedy(&pb, &gb);
            let involved = pb.len() + gb.len() - m.len();
            la_sum[c].0 += m.iter().sum::<f64>() / involved as f64;
            la_sum[c].1 += 1;
            if m.iter().any(|&v| v >= 0.5) {
                ba_sum[c].0 += bf1(&pg, &gg, tau);
                ba_sum[c].1 += 1;
            }
        }
    }
    let per_iou: Vec<Option<f64>> = (0..l)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let avg = |s: &[(f64, usize)]| -> Vec<Option<f64>> {
        s.iter().map(|&(a, n)| (n > 0).then(|| a / n as f64)).collect()
    };
    RefReport {
        miou: mean(&per_iou),
        ta: if pairs.is_empty() { 0.0 } else { ta / pairs.len() as f64 },
        la: mean(&avg(&la_sum)),
        ba: mean(&avg(&ba_sum)),
    }
}

fn paint(rng: &mut impl Rng, h: usize, w: usize, l: usize, rects: usize) -> LabelMap {
    let mut m = LabelMap::filled(h, w, 0).unwrap();
    for _ in 0..rects {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = (rng.gen_range(y0..h), rng.gen_range(x0..w));
        let c = rng.gen_range(0..l);
        for y in y0..=y1 {
            for x in x0..=x1 {
                m.set(y, x, c);
            }
        }
    }
    m
}

pub struct Fixture {
    pub pairs: Vec<(LabelMap, LabelMap)>,
    pub l: usize,
    pub ignore: Option<usize>,
    pub tau: usize,
}

/// Rectangle-painted fixtures; the prediction is the ground truth with a
/// few rectangles repainted, and some fixtures carry ignore regions.
pub fn fixtures(count: usize, seed: u64) -> Vec<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let l = rng.gen_range(2..=4);
            let ignore = (i % 3 == 0).then_some(255);
            let tau = rng.gen_range(0..=2);
            let images = rng.gen_range(1..=3);
            let pairs = (0..images)
                .map(|_| {
                    let (h, w) = (rng.gen_range(3..=12), rng.gen_range(3..=12));
                    let gt_rects = rng.gen_range(1..=4);
                    let mut gt = paint(&mut rng, h, w, l, gt_rects);
                    let mut pred = gt.clone();
                    for _ in 0..rng.gen_range(0..=3) {
                        let extra = paint(&mut rng, h, w, l, 1);
                        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
                        for y in y0..h.min(y0 + 3) {
                            for x in x0..w.min(x0 + 3) {
                                pred.set(y, x, extra.get(y, x));
                            }
                        }
                    }
                    if let Some(ig) = ignore {
                        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
                        for y in y0..h.min(y0 + 2) {
                            for x in x0..w.min(x0 + 2) {
                                gt.set(y, x, ig);
                            }
                        }
                    }
                    (pred, gt)
                })
                .collect();
            Fixture { pairs, l, ignore, tau }
        })
        .collect()
}
