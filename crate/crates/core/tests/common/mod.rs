//! Shared helpers and literal-formula reference evaluators for the
//! integration tests. The evaluators deliberately avoid the library's
//! numerics so that they are independent of the code under test.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = gaussian_vec(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn flatten(vs: &[Vec<f64>]) -> Vec<f64> {
    vs.iter().flatten().copied().collect()
}

pub fn unflatten(flat: &[f64], rows: usize, d: usize) -> Vec<Vec<f64>> {
    assert_eq!(flat.len(), rows * d);
    flat.chunks(d).map(<[f64]>::to_vec).collect()
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// One sample's regions for the reference evaluators: (class, regions).
pub type RefSample = (usize, Vec<Vec<f64>>);

/// Region weights straight from the definitions: for every region, mean
/// cosine to same-class regions of other samples and to all regions of other
/// classes, then a per-class softmax of each and the ratio. Returns lambdas
/// in sample-major, slot-minor order.
pub fn reference_lambdas(samples: &[RefSample], use_out: bool) -> Vec<f64> {
    let mut phi = Vec::new();
    let mut psi = Vec::new();
    let mut class_of = Vec::new();
    for (i, (ci, regs)) in samples.iter().enumerate() {
        for z in regs {
            let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0, 0.0, 0);
            for (l, (cl, other)) in samples.iter().enumerate() {
                for w in other {
                    if cl == ci && l != i {
                        s_in += naive_cos(z, w);
                        n_in += 1;
                    } else if cl != ci {
                        s_out += naive_cos(z, w);
                        n_out += 1;
                    }
                }
            }
            phi.push(if n_in == 0 { 0.0 } else { s_in / n_in as f64 });
            psi.push(if use_out { s_out / n_out as f64 } else { 0.0 });
            class_of.push(*ci);
        }
    }
    let n = phi.len();
    let mut lambdas = vec![0.0; n];
    for a in 0..n {
        let mut zp = 0.0;
        let mut zq = 0.0;
        for b in 0..n {
            if class_of[b] == class_of[a] {
                zp += phi[b].exp();
                zq += psi[b].exp();
            }
        }
        lambdas[a] = (phi[a].exp() / zp) / (psi[a].exp() / zq);
    }
    lambdas
}

/// Local compactness loss by its literal double sum over ordered
/// same-class pairs, normalized by the count of unordered same-class pairs.
pub fn reference_local_loss(regions: &[Vec<f64>], labels: &[usize], lambdas: &[f64], tau: f64) -> f64 {
    let n = regions.len();
    let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let s = |i: usize, v: usize| lambdas[i] * lambdas[v] * dotp(&regions[i], &regions[v]) / tau;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j || labels[i] != labels[j] {
                continue;
            }
            if i < j {
                pairs += 1;
            }
            let mut denom = 0.0;
            for v in 0..n {
                if v != i {
                    denom += s(i, v).exp();
                }
            }
            total += -(s(i, j).exp() / denom).ln();
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Global dispersion loss from the definitions: weighted prototypes,
/// cosine posterior at temperature `pi`, lambda-weighted mean negative log
/// posterior.
pub fn reference_global_loss(
    regions: &[Vec<f64>],
    region_labels: &[usize],
    lambdas: &[f64],
    images: &[Vec<f64>],
    image_labels: &[usize],
    omega: &[f64],
    way: usize,
    pi: f64,
) -> f64 {
    let d = images[0].len();
    let mut protos = vec![vec![0.0; d]; way];
    let mut counts = vec![0usize; way];
    for i in 0..images.len() {
        counts[image_labels[i]] += 1;
        for k in 0..d {
            protos[image_labels[i]][k] += omega[i] * images[i][k];
        }
    }
    for c in 0..way {
        for k in 0..d {
            protos[c][k] /= counts[c] as f64;
        }
    }
    let mut total = 0.0;
    for r in 0..regions.len() {
        let e: Vec<f64> = protos.iter().map(|m| (naive_cos(&regions[r], m) / pi).exp()).collect();
        let z: f64 = e.iter().sum();
        total -= lambdas[r] * (e[region_labels[r]] / z).ln();
    }
    total / regions.len() as f64
}

pub mod gradsuite {
    //! Randomized finite-difference checks of every analytic gradient.

    use super::*;
    use deta::adaptation::AdaptationModel;
    use deta::losses::{
        combined_loss, global_dispersion_loss, local_compactness_loss, EmbeddingBatch, LossHyperparams, LossTerms,
    };
    use deta::numerics::{finite_difference_gradient, GradCheckConfig};

    /// A random small instance: at most 3 classes, at most 3 samples per
    /// class, at most 2 regions per sample, dimension at most 16.
    pub struct Instance {
        pub way: usize,
        pub dim: usize,
        pub images: Vec<Vec<f64>>,
        pub image_labels: Vec<usize>,
        pub regions: Vec<Vec<f64>>,
        pub region_labels: Vec<usize>,
        pub region_owner: Vec<usize>,
        pub lambdas: Vec<f64>,
        pub omega: Vec<f64>,
    }

    pub fn instance(seed: u64) -> Instance {
        let mut r = rng(seed);
        let way = r.random_range(2..=3);
        let dim = r.random_range(3..=16);
        let k = r.random_range(1..=2);
        let mut inst = Instance {
            way,
            dim,
            images: vec![],
            image_labels: vec![],
            regions: vec![],
            region_labels: vec![],
            region_owner: vec![],
            lambdas: vec![],
            omega: vec![],
        };
        for c in 0..way {
            let shots = r.random_range(1..=3);
            for _ in 0..shots {
                let i = inst.images.len();
                inst.images.push(unit_vec(&mut r, dim));
                inst.image_labels.push(c);
                inst.omega.push(r.random_range(0.5..1.5));
                for _ in 0..k {
                    inst.regions.push(unit_vec(&mut r, dim));
                    inst.region_labels.push(c);
                    inst.region_owner.push(i);
                    inst.lambdas.push(r.random_range(0.5..1.5));
                }
            }
        }
        inst
    }

    fn compare(analytic: &[f64], numeric: &[f64], what: &str) -> Result<(), String> {
        let cfg = GradCheckConfig::default();
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            if !cfg.agrees(a, n) {
                return Err(format!("{what}: coordinate {i}: analytic {a:e} vs numeric {n:e}"));
            }
        }
        Ok(())
    }

    pub fn check_local(seed: u64) -> Result<(), String> {
        let x = instance(seed);
        let tau = 0.5;
        let n = x.regions.len();
        let (_, g) = local_compactness_loss(&x.regions, &x.region_labels, &x.lambdas, x.way, tau).unwrap();
        let f = |p: &[f64]| {
            local_compactness_loss(&unflatten(p, n, x.dim), &x.region_labels, &x.lambdas, x.way, tau)
                .unwrap()
                .0
        };
        let num = finite_difference_gradient(f, &flatten(&x.regions), &GradCheckConfig::default()).unwrap();
        compare(&flatten(&g), &num, "local loss")
    }

    pub fn check_global(seed: u64) -> Result<(), String> {
        let x = instance(seed);
        let pi = 0.07;
        let (nr, ni) = (x.regions.len(), x.images.len());
        let g = global_dispersion_loss(
            &x.regions,
            &x.region_labels,
            &x.lambdas,
            &x.images,
            &x.image_labels,
            &x.omega,
            x.way,
            pi,
        )
        .unwrap();
        let f = |p: &[f64]| {
            let (rp, ip) = p.split_at(nr * x.dim);
            global_dispersion_loss(
                &unflatten(rp, nr, x.dim),
                &x.region_labels,
                &x.lambdas,
                &unflatten(ip, ni, x.dim),
                &x.image_labels,
                &x.omega,
                x.way,
                pi,
            )
            .unwrap()
            .value
        };
        let mut p = flatten(&x.regions);
        p.extend(flatten(&x.images));
        let num = finite_difference_gradient(f, &p, &GradCheckConfig::default()).unwrap();
        let mut analytic = flatten(&g.grad_regions);
        analytic.extend(flatten(&g.grad_images));
        compare(&analytic, &num, "global loss")
    }

    fn batch(x: &Instance, regions: Vec<Vec<f64>>, images: Vec<Vec<f64>>) -> EmbeddingBatch<f64> {
        EmbeddingBatch {
            way: x.way,
            image_embeddings: images,
            image_labels: x.image_labels.clone(),
            region_embeddings: regions,
            region_labels: x.region_labels.clone(),
            region_owner: x.region_owner.clone(),
        }
    }

    pub fn check_combined(seed: u64) -> Result<(), String> {
        let x = instance(seed);
        let hp = LossHyperparams::default();
        let (nr, ni) = (x.regions.len(), x.images.len());
        let v = combined_loss(&batch(&x, x.regions.clone(), x.images.clone()), &x.lambdas, &x.omega, &hp).unwrap();
        let f = |p: &[f64]| {
            let (rp, ip) = p.split_at(nr * x.dim);
            let b = batch(&x, unflatten(rp, nr, x.dim), unflatten(ip, ni, x.dim));
            combined_loss(&b, &x.lambdas, &x.omega, &hp).unwrap().combined
        };
        let mut p = flatten(&x.regions);
        p.extend(flatten(&x.images));
        let num = finite_difference_gradient(f, &p, &GradCheckConfig::default()).unwrap();
        let mut analytic = flatten(&v.grad_regions);
        analytic.extend(flatten(&v.grad_images));
        compare(&analytic, &num, "combined loss")
    }

    /// Adapter and head parameters, checked together through the full
    /// forward pass. The adapter starts away from zero so that its gradient
    /// path is exercised at a generic point.
    pub fn check_model(seed: u64) -> Result<(), String> {
        let x = instance(seed);
        let mut r = rng(seed ^ 0xA5A5);
        let hidden = r.random_range(4..=10);
        let embed = r.random_range(3..=8);
        let mut model = AdaptationModel::<f64>::init(x.dim, hidden, embed, seed);
        model.adapter.weight.data.iter_mut().for_each(|w| *w = 0.1 * r.random_range(-1.0..1.0));
        model.adapter.bias.iter_mut().for_each(|b| *b = 0.1 * r.random_range(-1.0..1.0));
        let mut grouped: Vec<Vec<Vec<f64>>> = vec![vec![]; x.images.len()];
        for (reg, &o) in x.regions.iter().zip(&x.region_owner) {
            grouped[o].push(reg.clone());
        }
        let hp = LossHyperparams::default();
        let terms = LossTerms::default();
        let (_, grads) = model
            .loss_and_grad(&x.images, &grouped, &x.image_labels, x.way, &x.lambdas, &x.omega, &hp, terms)
            .unwrap();
        let f = |p: &[f64]| {
            let mut m = model.clone();
            m.set_flat_params(p).unwrap();
            m.loss_and_grad(&x.images, &grouped, &x.image_labels, x.way, &x.lambdas, &x.omega, &hp, terms)
                .unwrap()
                .0
                .combined
        };
        let num = finite_difference_gradient(f, &model.flat_params(), &GradCheckConfig::default()).unwrap();
        compare(&grads.flat_params(), &num, "adapter and head")
    }
}
