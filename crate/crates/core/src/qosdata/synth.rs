//! Synthetic datasets: an exactly low-rank fixture and a generator shaped
//! like the public two-task web-service benchmark (response time in
//! seconds, throughput in kbps, region/AS context, ~93% observed).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ContextAttr, QosDataset};
use crate::linalg::Mat;
use crate::rng::rng_for;

/// Fully observed tasks with `Q^p = U_p V_pᵀ` of the given rank. Task `p`
/// is scaled by `10^p` so the tasks live on different numeric ranges.
pub fn low_rank(n: usize, m: usize, rank: usize, tasks: usize, seed: u64) -> QosDataset {
    let mut rng = rng_for(seed, 0x10_4A4B);
    let mut mats = Vec::with_capacity(tasks);
    for p in 0..tasks {
        let scale = 10f64.powi(p as i32);
        let u = Mat::from_vec(n, rank, (0..n * rank).map(|_| rng.gen_range(0.2..1.0)).collect()).unwrap();
        let v = Mat::from_vec(m, rank, (0..m * rank).map(|_| rng.gen_range(0.2..1.0)).collect()).unwrap();
        let mut q = u.matmul_nt(&v);
        q.scale(scale);
        mats.push(q);
    }
    let label = |k: usize, modulo: usize, prefix: &str| {
        (0..k).map(|i| format!("{prefix}{}", i % modulo)).collect::<Vec<_>>()
    };
    let region = ContextAttr::from_labels(&label(n, 3, "R"), &label(m, 3, "R"));
    let as_attr = ContextAttr::from_labels(&label(n, 5, "AS"), &label(m, 4, "AS"));
    let names = (0..tasks).map(|p| format!("t{p}")).collect();
    QosDataset::from_dense(names, mats, region, as_attr).expect("low-rank fixture is valid")
}

struct Entity {
    region: usize,
    as_id: usize,
    latent: [f64; 3],
    bias: f64,
}

/// Zipf-like categorical draw over `k` categories.
fn zipf(rng: &mut impl Rng, k: usize) -> usize {
    let total: f64 = (1..=k).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.gen::<f64>() * total;
    for r in 1..=k {
        u -= 1.0 / r as f64;
        if u <= 0.0 {
            return r - 1;
        }
    }
    k - 1
}

/// Two tasks (`rt`, `tp`) with region/AS-structured latent factors,
/// heavy-tailed values, and ~7% of cells unobserved.
pub fn wsdream_like(n: usize, m: usize, seed: u64) -> QosDataset {
    let mut rng = rng_for(seed, 0x3D2E_A4);
    let std = |s: f64| Normal::new(0.0, s).unwrap();
    let n_regions = 74usize.min((n + m) / 4).max(2);
    let geo: Vec<[f64; 2]> = (0..n_regions).map(|_| [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)]).collect();
    let region_latent: Vec<[f64; 3]> =
        (0..n_regions).map(|_| [std(0.6).sample(&mut rng), std(0.6).sample(&mut rng), std(0.6).sample(&mut rng)]).collect();

    let mut as_latent: Vec<Vec<[f64; 3]>> = vec![Vec::new(); n_regions];
    let mut make = |rng: &mut rand_chacha::ChaCha8Rng, as_per_region: usize, bias_sd: f64| {
        let region = zipf(rng, n_regions);
        let slot = rng.gen_range(0..as_per_region);
        while as_latent[region].len() <= slot {
            let l = [std(0.4).sample(rng), std(0.4).sample(rng), std(0.4).sample(rng)];
            as_latent[region].push(l);
        }
        let mut latent = [0.0; 3];
        for d in 0..3 {
            latent[d] = region_latent[region][d] + as_latent[region][slot][d] + std(0.25).sample(rng);
        }
        Entity { region, as_id: region * 1000 + slot, latent, bias: std(bias_sd).sample(rng) }
    };
    let users: Vec<Entity> = (0..n).map(|_| make(&mut rng, 3, 0.5)).collect();
    let services: Vec<Entity> = (0..m).map(|_| make(&mut rng, 6, 0.7)).collect();
    let service_tp: Vec<f64> = (0..m).map(|_| std(0.6).sample(&mut rng)).collect();

    let mut rt = Mat::zeros(n, m);
    let mut tp = Mat::zeros(n, m);
    for (i, u) in users.iter().enumerate() {
        for (j, s) in services.iter().enumerate() {
            if rng.gen::<f64>() < 0.07 {
                continue;
            }
            let (gu, gs) = (geo[u.region], geo[s.region]);
            let dist = ((gu[0] - gs[0]).powi(2) + (gu[1] - gs[1]).powi(2)).sqrt();
            let affinity: f64 = u.latent.iter().zip(&s.latent).map(|(a, b)| a * b).sum();
            let log_rt = -1.5 + u.bias + s.bias + 0.6 * dist + 0.35 * affinity + std(0.3).sample(&mut rng);
            rt.set(i, j, log_rt.exp().clamp(0.001, 19.99));
            let log_tp = 2.9 - 0.8 * (log_rt + 1.0) + service_tp[j] - 0.2 * affinity + std(0.35).sample(&mut rng);
            tp.set(i, j, log_tp.exp().clamp(0.004, 1000.0));
        }
    }
    let labels = |es: &[Entity], f: &dyn Fn(&Entity) -> String| es.iter().map(f).collect::<Vec<_>>();
    let reg = |e: &Entity| format!("R{}", e.region);
    let asn = |e: &Entity| format!("AS{}", e.as_id);
    let region = ContextAttr::from_labels(&labels(&users, &reg), &labels(&services, &reg));
    let as_attr = ContextAttr::from_labels(&labels(&users, &asn), &labels(&services, &asn));
    QosDataset::from_dense(vec!["rt".into(), "tp".into()], vec![rt, tp], region, as_attr)
        .expect("synthetic dataset is valid")
}
