//! Straight-line reference implementations and finite-difference helpers.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relkd::distmath::{LogitVector, Temperature};
use relkd::losses::{
    ce_loss, combined_total, cpdp_loss, ewad_loss, inter_match_loss, kd_loss, standard_total, CpdpAnchor, EwadRouting,
    HiddenPair, LossWeights, TeacherScores, TokenBatch,
};
use relkd::reliability::ReliabilityConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn o_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let mut mx = f64::NEG_INFINITY;
    for &x in z {
        if x > mx {
            mx = x;
        }
    }
    let mut e = Vec::new();
    let mut s = 0.0;
    for &x in z {
        let v = ((x - mx) / tau).exp();
        e.push(v);
        s += v;
    }
    for v in e.iter_mut() {
        *v /= s;
    }
    e
}

pub fn o_log_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let mut mx = f64::NEG_INFINITY;
    for &x in z {
        if x > mx {
            mx = x;
        }
    }
    let mut s = 0.0;
    for &x in z {
        s += ((x - mx) / tau).exp();
    }
    z.iter().map(|&x| (x - mx) / tau - s.ln()).collect()
}

pub fn o_entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

pub fn o_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut d = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            d += p[i] * (p[i].ln() - q[i].ln());
        }
    }
    d
}

pub fn o_jsd(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = (0..p.len()).map(|i| 0.5 * (p[i] + q[i])).collect();
    0.5 * o_kl(p, &m) + 0.5 * o_kl(q, &m)
}

pub fn o_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gate and weights at one position, from teacher scores.
pub fn o_reliability(s1: &[f64], s2: &[f64], k: f64, delta: f64, tw: f64) -> (f64, f64, f64, f64) {
    let p1 = o_softmax(s1, 1.0);
    let p2 = o_softmax(s2, 1.0);
    let lnv = (p1.len() as f64).ln();
    let c1 = 1.0 - o_entropy(&p1) / lnv;
    let c2 = 1.0 - o_entropy(&p2) / lnv;
    let w1 = o_sigmoid((c1 - c2) / tw);
    let a = 1.0 - o_jsd(&p1, &p2) / 2f64.ln();
    let lam = o_sigmoid(k * (a - delta));
    (w1, 1.0 - w1, a, lam)
}

/// One random loss instance over a small vocabulary.
#[derive(Debug, Clone)]
pub struct Instance {
    pub v: usize,
    pub student: Vec<Vec<f64>>,
    pub t1: Vec<Vec<f64>>,
    pub t2: Vec<Vec<f64>>,
    pub gold: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Instance {
    pub fn random(r: &mut ChaCha8Rng, max_v: usize, max_t: usize) -> Self {
        let v = r.gen_range(2..=max_v);
        let t = r.gen_range(1..=max_t);
        let logits = |r: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..t)
                .map(|_| (0..v).map(|_| r.gen_range(-3.0..3.0)).collect())
                .collect()
        };
        let student = logits(r);
        let t1 = logits(r);
        let t2 = logits(r);
        let gold = (0..t).map(|_| r.gen_range(0..v)).collect();
        let mut mask: Vec<bool> = (0..t).map(|_| r.gen_bool(0.8)).collect();
        let keep = r.gen_range(0..t);
        mask[keep] = true;
        Self {
            v,
            student,
            t1,
            t2,
            gold,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.student.len()
    }

    pub fn m(&self) -> f64 {
        self.mask.iter().filter(|&&b| b).count() as f64
    }

    pub fn batch_with(&self, student: &[Vec<f64>]) -> TokenBatch {
        let logits = student.iter().map(|z| LogitVector::new(z.clone()).unwrap()).collect();
        let scores = |t: &[Vec<f64>]| t.iter().map(|z| TeacherScores::new(z.clone()).unwrap()).collect();
        TokenBatch::new(self.gold.clone(), self.mask.clone(), logits)
            .unwrap()
            .with_teacher1(scores(&self.t1))
            .unwrap()
            .with_teacher2(scores(&self.t2))
            .unwrap()
    }

    pub fn batch(&self) -> TokenBatch {
        self.batch_with(&self.student)
    }
}

pub fn o_ce(inst: &Instance, z: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for t in 0..inst.len() {
        if inst.mask[t] {
            total -= o_log_softmax(&z[t], 1.0)[inst.gold[t]];
        }
    }
    total / inst.m()
}

pub fn o_kd(inst: &Instance, z: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for t in 0..inst.len() {
        if inst.mask[t] {
            let pt = o_softmax(&inst.t1[t], tau);
            let ps = o_softmax(&z[t], tau);
            total += tau * tau * o_kl(&pt, &ps);
        }
    }
    total / inst.m()
}

/// Hidden-state matching: mean of squared distance between unit vectors.
pub fn o_inter(hs: &[Vec<f64>], ht: &[Vec<f64>], w: &[f64], dt: usize, mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut m = 0.0;
    for t in 0..hs.len() {
        if !mask[t] {
            continue;
        }
        m += 1.0;
        let mut u = vec![0.0; dt];
        for (i, &h) in hs[t].iter().enumerate() {
            for j in 0..dt {
                u[j] += h * w[i * dt + j];
            }
        }
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nt = ht[t].iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..dt {
            let d = u[j] / nu - ht[t][j] / nt;
            total += d * d;
        }
    }
    total / m
}

#[derive(Debug, Clone, Copy)]
pub struct EwadParams {
    pub k: f64,
    pub delta: f64,
    pub tw: f64,
    pub tau: f64,
    pub lambda: Option<f64>,
    pub weights: Option<(f64, f64)>,
}

impl Default for EwadParams {
    fn default() -> Self {
        Self {
            k: 5.0,
            delta: 0.5,
            tw: 1.0,
            tau: 1.0,
            lambda: None,
            weights: None,
        }
    }
}

pub fn o_ewad(inst: &Instance, z: &[Vec<f64>], p: &EwadParams) -> f64 {
    let mut total = 0.0;
    for t in 0..inst.len() {
        if !inst.mask[t] {
            continue;
        }
        let (mut w1, mut w2, _, mut lam) = o_reliability(&inst.t1[t], &inst.t2[t], p.k, p.delta, p.tw);
        if let Some((a, b)) = p.weights {
            w1 = a;
            w2 = b;
        }
        if let Some(l) = p.lambda {
            lam = l;
        }
        let ps = o_softmax(&z[t], p.tau);
        let kd = w1 * o_kl(&o_softmax(&inst.t1[t], p.tau), &ps) + w2 * o_kl(&o_softmax(&inst.t2[t], p.tau), &ps);
        let ce = -o_log_softmax(&z[t], 1.0)[inst.gold[t]];
        total += lam * kd + (1.0 - lam) * ce;
    }
    total / inst.m()
}

/// Per-token divergence-preservation penalty. With `frozen`, the student
/// entropy at each position is taken from it instead of from `z`.
pub fn o_cpdp(inst: &Instance, z: &[Vec<f64>], delta: f64, clamp: f64, frozen: Option<&[f64]>) -> f64 {
    let mut total = 0.0;
    for t in 0..inst.len() {
        if !inst.mask[t] {
            continue;
        }
        let ps = o_softmax(&z[t], 1.0);
        let h = match frozen {
            Some(f) => f[t],
            None => o_entropy(&ps).max(1e-8),
        };
        let k1 = o_kl(&o_softmax(&inst.t1[t], 1.0), &ps);
        let k2 = o_kl(&o_softmax(&inst.t2[t], 1.0), &ps);
        let g = (k1 - k2) / h - delta;
        total += (g * g).min(clamp);
    }
    total / inst.m()
}

pub fn student_entropies(z: &[Vec<f64>]) -> Vec<f64> {
    z.iter().map(|r| o_entropy(&o_softmax(r, 1.0)).max(1e-8)).collect()
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn fd_grad<F: Fn(&[Vec<f64>]) -> f64>(x: &[Vec<f64>], f: F, h: f64) -> Vec<Vec<f64>> {
    let mut out = vec![];
    let mut y = x.to_vec();
    for t in 0..x.len() {
        let mut row = vec![];
        for k in 0..x[t].len() {
            let orig = y[t][k];
            y[t][k] = orig + h;
            let fp = f(&y);
            y[t][k] = orig - h;
            let fm = f(&y);
            y[t][k] = orig;
            row.push((fp - fm) / (2.0 * h));
        }
        out.push(row);
    }
    out
}

pub fn fd_flat<F: Fn(&[f64]) -> f64>(x: &[f64], f: F, h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = y[i];
            y[i] = orig + h;
            let fp = f(&y);
            y[i] = orig - h;
            let fm = f(&y);
            y[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, 1e-4)`, worst case over all entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

pub fn flatten(x: &[Vec<f64>]) -> Vec<f64> {
    x.iter().flatten().copied().collect()
}

/// Brute-force LCS over all subsequences of the shorter input.
pub fn o_lcs(a: &[u32], b: &[u32]) -> usize {
    fn rec(a: &[u32], b: &[u32]) -> usize {
        if a.is_empty() || b.is_empty() {
            return 0;
        }
        if a[0] == b[0] {
            1 + rec(&a[1..], &b[1..])
        } else {
            rec(&a[1..], b).max(rec(a, &b[1..]))
        }
    }
    rec(a, b)
}

pub const FD_STEP: f64 = 1e-5;

/// Which objective a gradient check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCase {
    Ce,
    Kd,
    Inter,
    Standard,
    Ewad,
    Cpdp,
    Combined,
}

pub const ALL_GRAD_CASES: [GradCase; 7] = [
    GradCase::Ce,
    GradCase::Kd,
    GradCase::Inter,
    GradCase::Standard,
    GradCase::Ewad,
    GradCase::Cpdp,
    GradCase::Combined,
];

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn random_ewad(r: &mut ChaCha8Rng) -> (EwadParams, EwadRouting) {
    let routing = [
        EwadRouting::FULL,
        EwadRouting::CONFIDENCE_ONLY,
        EwadRouting::AGREEMENT_ONLY,
        EwadRouting::FIXED_WEIGHTS,
    ][r.gen_range(0..4)];
    let p = EwadParams {
        k: r.gen_range(1.0..10.0),
        delta: r.gen_range(0.0..1.0),
        tw: r.gen_range(0.5..2.0),
        tau: r.gen_range(0.5..2.0),
        lambda: routing.lambda,
        weights: routing.weights,
    };
    (p, routing)
}

fn rcfg(p: &EwadParams) -> ReliabilityConfig {
    ReliabilityConfig::new(p.k, p.delta, p.tw).unwrap()
}

/// True when some masked position sits close enough to the CPDP clamp that
/// a finite-difference step could cross it.
fn near_clamp(inst: &Instance, delta: f64, clamp: f64) -> bool {
    let hs = student_entropies(&inst.student);
    (0..inst.len()).any(|t| {
        if !inst.mask[t] {
            return false;
        }
        let ps = o_softmax(&inst.student[t], 1.0);
        let g = (o_kl(&o_softmax(&inst.t1[t], 1.0), &ps) - o_kl(&o_softmax(&inst.t2[t], 1.0), &ps)) / hs[t] - delta;
        (g * g - clamp).abs() < 0.05 * clamp
    })
}

/// Runs one randomized analytic-vs-numeric comparison and returns the worst
/// relative error. Instances use `|V| <= 8`, `T <= 6`.
pub fn grad_check(case: GradCase, seed: u64) -> f64 {
    let mut r = rng(seed);
    let inst = Instance::random(&mut r, 8, 6);
    let z = inst.student.clone();
    match case {
        GradCase::Ce => {
            let g = ce_loss(&inst.batch()).unwrap().grad;
            let n = fd_grad(&z, |y| o_ce(&inst, y), FD_STEP);
            max_rel_err(&flatten(&g), &flatten(&n))
        }
        GradCase::Kd => {
            let tau = r.gen_range(0.5..2.0);
            let g = kd_loss(&inst.batch(), Temperature::new(tau).unwrap()).unwrap().grad;
            let n = fd_grad(&z, |y| o_kd(&inst, y, tau), FD_STEP);
            max_rel_err(&flatten(&g), &flatten(&n))
        }
        GradCase::Inter => {
            let (ds, dt) = (r.gen_range(1..=4), r.gen_range(2..=4));
            let hs = random_matrix(&mut r, inst.len(), ds);
            let ht = random_matrix(&mut r, inst.len(), dt);
            let w = flatten(&random_matrix(&mut r, ds, dt));
            let pair = HiddenPair {
                student_hidden: hs.clone(),
                teacher_hidden: ht.clone(),
                projection: w.clone(),
                student_dim: ds,
                teacher_dim: dt,
            };
            let g = inter_match_loss(&pair, &inst.mask).unwrap();
            let nh = fd_grad(&hs, |y| o_inter(y, &ht, &w, dt, &inst.mask), FD_STEP);
            let nw = fd_flat(&w, |y| o_inter(&hs, &ht, y, dt, &inst.mask), FD_STEP);
            max_rel_err(&flatten(&g.student_hidden), &flatten(&nh)).max(max_rel_err(&g.projection, &nw))
        }
        GradCase::Standard => {
            let a_kd = r.gen_range(0.0..0.6);
            let a_in = r.gen_range(0.0..0.4);
            let tau = r.gen_range(0.5..2.0);
            let (ds, dt) = (r.gen_range(1..=4), r.gen_range(2..=4));
            let hs = random_matrix(&mut r, inst.len(), ds);
            let ht = random_matrix(&mut r, inst.len(), dt);
            let w = flatten(&random_matrix(&mut r, ds, dt));
            let pair = HiddenPair {
                student_hidden: hs.clone(),
                teacher_hidden: ht.clone(),
                projection: w.clone(),
                student_dim: ds,
                teacher_dim: dt,
            };
            let weights = LossWeights::new(a_kd, a_in, 0.0, 100.0).unwrap();
            let out = standard_total(&inst.batch(), Some(&pair), &weights, Temperature::new(tau).unwrap()).unwrap();
            let hard = 1.0 - a_kd - a_in;
            let total = |y: &[Vec<f64>], h: &[Vec<f64>], w: &[f64]| {
                hard * o_ce(&inst, y) + a_kd * o_kd(&inst, y, tau) + a_in * o_inter(h, &ht, w, dt, &inst.mask)
            };
            let nz = fd_grad(&z, |y| total(y, &hs, &w), FD_STEP);
            let nh = fd_grad(&hs, |h| total(&z, h, &w), FD_STEP);
            let nw = fd_flat(&w, |w| total(&z, &hs, w), FD_STEP);
            let gh = out.hidden_grad.unwrap();
            let gw = out.projection_grad.unwrap();
            max_rel_err(&flatten(&out.logits_grad), &flatten(&nz))
                .max(max_rel_err(&flatten(&gh), &flatten(&nh)))
                .max(max_rel_err(&gw, &nw))
        }
        GradCase::Ewad => {
            let (p, routing) = random_ewad(&mut r);
            let out = ewad_loss(&inst.batch(), &rcfg(&p), Temperature::new(p.tau).unwrap(), routing).unwrap();
            let n = fd_grad(&z, |y| o_ewad(&inst, y, &p), FD_STEP);
            max_rel_err(&flatten(&out.grad), &flatten(&n))
        }
        GradCase::Cpdp => {
            let mut inst = inst;
            let mut delta = r.gen_range(0.0..1.0);
            while near_clamp(&inst, delta, 100.0) {
                inst = Instance::random(&mut r, 8, 6);
                delta = r.gen_range(0.0..1.0);
            }
            let anchor = CpdpAnchor::new(delta).unwrap();
            let out = cpdp_loss(&inst.batch(), &anchor, 100.0).unwrap();
            let frozen = student_entropies(&inst.student);
            let n = fd_grad(
                &inst.student,
                |y| o_cpdp(&inst, y, delta, 100.0, Some(&frozen)),
                FD_STEP,
            );
            max_rel_err(&flatten(&out.grad), &flatten(&n))
        }
        GradCase::Combined => {
            let mut inst = inst;
            let mut delta = r.gen_range(0.0..1.0);
            while near_clamp(&inst, delta, 100.0) {
                inst = Instance::random(&mut r, 8, 6);
                delta = r.gen_range(0.0..1.0);
            }
            let (p, routing) = random_ewad(&mut r);
            let mu = r.gen_range(0.0..1.0);
            let weights = LossWeights::new(0.0, 0.0, mu, 100.0).unwrap();
            let anchor = CpdpAnchor::new(delta).unwrap();
            let out = combined_total(
                &inst.batch(),
                &rcfg(&p),
                &anchor,
                &weights,
                Temperature::new(p.tau).unwrap(),
                routing,
            )
            .unwrap();
            let frozen = student_entropies(&inst.student);
            let n = fd_grad(
                &inst.student,
                |y| o_ewad(&inst, y, &p) + mu * o_cpdp(&inst, y, delta, 100.0, Some(&frozen)),
                FD_STEP,
            );
            max_rel_err(&flatten(&out.grad), &flatten(&n))
        }
    }
}
