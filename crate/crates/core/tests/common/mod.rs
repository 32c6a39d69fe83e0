//! Helpers shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visex_core::nn::Mlp;
use visex_core::repr::{init_loss_and_grad, margin_loss_and_grad, all_pairs, ClassDoc, WeightNet};
use visex_core::zsl::{devise_loss_and_grad, joint_loss_and_grad, DeviseModel, Example, JointRepr};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Relative error with a small absolute floor so that two near-zero
/// gradients are not compared digit by digit.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

pub fn central_differences(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max)
}

pub fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

pub fn random_docs(rng: &mut impl Rng, n_classes: usize, max_len: usize, dim: usize) -> Vec<ClassDoc> {
    (0..n_classes)
        .map(|c| {
            let m = rng.random_range(1..=max_len);
            let embeddings = (0..m).map(|_| gaussian_vec(rng, dim)).collect();
            ClassDoc::new(format!("c{c}"), embeddings).unwrap()
        })
        .collect()
}

/// Zero biases put rectifier inputs exactly on the kink whenever a whole
/// layer is off, where central differences average two one-sided slopes;
/// jittering every parameter moves the fixtures off those points.
fn jitter(params: &mut [f64], rng: &mut ChaCha8Rng) {
    for p in params {
        *p += 0.3 * (rng.random::<f64>() - 0.5);
    }
}

fn random_net(rng: &mut ChaCha8Rng, dim: usize) -> WeightNet {
    let hidden = [rng.random_range(2..6), rng.random_range(2..6)];
    let mut net = WeightNet::random_scaled(dim, &hidden, 1.0, rng.random()).unwrap();
    jitter(net.params_mut(), rng);
    net
}

fn with_params(net: &WeightNet, p: &[f64]) -> WeightNet {
    let mut n = net.clone();
    n.params_mut().copy_from_slice(p);
    n
}

/// Largest relative error of the class-to-mean hinge gradient over `restarts` draws.
pub fn init_gradient_suite(restarts: u64) -> f64 {
    (0..restarts)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let dim = rng.random_range(2..5);
            let n = rng.random_range(2..4);
            let docs = random_docs(&mut rng, n, 4, dim);
            let net = random_net(&mut rng, dim);
            let scale = seed % 2 == 0;
            // high epsilon keeps most hinge terms active
            let (_, analytic) = init_loss_and_grad(&net, &docs, 0.999, scale);
            let numeric = central_differences(net.params(), |p| init_loss_and_grad(&with_params(&net, p), &docs, 0.999, scale).0);
            max_rel_err(&analytic, &numeric)
        })
        .fold(0.0, f64::max)
}

/// Same for the pairwise similarity hinge; both ends of every pair move.
pub fn margin_gradient_suite(restarts: u64) -> f64 {
    (0..restarts)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let dim = rng.random_range(2..5);
            let n = rng.random_range(2..5);
            let docs = random_docs(&mut rng, n, 4, dim);
            let net = random_net(&mut rng, dim);
            let pairs = all_pairs(docs.len());
            let tau = -0.9;
            let scale = seed % 2 == 1;
            let (_, analytic) = margin_loss_and_grad(&net, &docs, &pairs, tau, scale);
            let numeric = central_differences(net.params(), |p| {
                margin_loss_and_grad(&with_params(&net, p), &docs, &pairs, tau, scale).0
            });
            max_rel_err(&analytic, &numeric)
        })
        .fold(0.0, f64::max)
}

pub struct RankingProblem {
    pub model: DeviseModel,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<usize>>,
}

impl RankingProblem {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dx, da) = (rng.random_range(2..5), rng.random_range(2..5));
        let (hidden, latent) = (rng.random_range(2..5), rng.random_range(2..4));
        let mut f = Mlp::random(&[dx, hidden, hidden, latent], 1.0, &mut rng).unwrap();
        let mut g = Mlp::random(&[da, hidden, hidden, latent], 1.0, &mut rng).unwrap();
        jitter(f.params_mut(), &mut rng);
        jitter(g.params_mut(), &mut rng);
        let m = gaussian_vec(&mut rng, latent * latent);
        // a large margin keeps every hinge term away from its kink
        let model = DeviseModel::from_parts(f, g, m, 5.0).unwrap();
        let n_classes = rng.random_range(2..5);
        let n = rng.random_range(2..6);
        let features = (0..n).map(|_| gaussian_vec(&mut rng, dx)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
        let classes = (0..n_classes).map(|_| gaussian_vec(&mut rng, da)).collect();
        let negatives = labels.iter().map(|&y| (0..n_classes).filter(|&c| c != y).collect()).collect();
        Self {
            model,
            features,
            labels,
            classes,
            negatives,
        }
    }

    pub fn examples(&self) -> Vec<Example<'_>> {
        self.features
            .iter()
            .zip(&self.labels)
            .map(|(x, &label)| Example { features: x, label })
            .collect()
    }

    pub fn loss(&self, model: &DeviseModel, classes: &[Vec<f64>]) -> f64 {
        let refs: Vec<&[f64]> = classes.iter().map(Vec::as_slice).collect();
        devise_loss_and_grad(model, &self.examples(), &refs, &self.negatives).0
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut p = self.model.f.params().to_vec();
        p.extend_from_slice(self.model.g.params());
        p.extend_from_slice(&self.model.m);
        p
    }

    fn model_with(&self, p: &[f64]) -> DeviseModel {
        let mut model = self.model.clone();
        let (nf, ng) = (model.f.params().len(), model.g.params().len());
        model.f.params_mut().copy_from_slice(&p[..nf]);
        model.g.params_mut().copy_from_slice(&p[nf..nf + ng]);
        model.m.copy_from_slice(&p[nf + ng..]);
        model
    }
}

/// Ranking-loss gradient with respect to f, g, M and the class vectors.
pub fn ranking_gradient_suite(restarts: u64) -> f64 {
    (0..restarts)
        .map(|seed| {
            let prob = RankingProblem::random(3000 + seed);
            let refs: Vec<&[f64]> = prob.classes.iter().map(Vec::as_slice).collect();
            let (_, grad) = devise_loss_and_grad(&prob.model, &prob.examples(), &refs, &prob.negatives);
            let mut analytic = grad.f.clone();
            analytic.extend_from_slice(&grad.g);
            analytic.extend_from_slice(&grad.m);
            let numeric = central_differences(&prob.flat_params(), |p| prob.loss(&prob.model_with(p), &prob.classes));
            let mut worst = max_rel_err(&analytic, &numeric);

            let flat_classes: Vec<f64> = prob.classes.concat();
            let da = prob.classes[0].len();
            let numeric = central_differences(&flat_classes, |p| {
                let cls: Vec<Vec<f64>> = p.chunks(da).map(<[f64]>::to_vec).collect();
                prob.loss(&prob.model, &cls)
            });
            worst = worst.max(max_rel_err(&grad.classes.concat(), &numeric));
            worst
        })
        .fold(0.0, f64::max)
}

/// Joint mode: ranking loss differentiated through the weight network.
pub fn joint_gradient_suite(restarts: u64) -> f64 {
    (0..restarts)
        .map(|seed| {
            let mut prob = RankingProblem::random(4000 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
            let da = prob.classes[0].len();
            let n_classes = prob.classes.len();
            let docs = random_docs(&mut rng, n_classes, 3, da);
            let vocab: Vec<String> = docs.iter().map(|d| d.class_id.clone()).collect();
            let joint = JointRepr {
                net: random_net(&mut rng, da),
                docs: docs.into_iter().map(|d| (d.class_id.clone(), d)).collect::<BTreeMap<_, _>>(),
                scale_by_count: seed % 2 == 0,
            };
            prob.classes.clear();
            let (_, _, analytic) = joint_loss_and_grad(&prob.model, &joint, &vocab, &prob.examples(), &prob.negatives).unwrap();
            let numeric = central_differences(joint.net.params(), |p| {
                let j = JointRepr {
                    net: with_params(&joint.net, p),
                    docs: joint.docs.clone(),
                    scale_by_count: joint.scale_by_count,
                };
                joint_loss_and_grad(&prob.model, &j, &vocab, &prob.examples(), &prob.negatives).unwrap().0
            });
            max_rel_err(&analytic, &numeric)
        })
        .fold(0.0, f64::max)
}
