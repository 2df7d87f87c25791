//! Analytic gradients against central finite differences. Each check
//! returns the worst relative error over its trials.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wlrn::bag_match::{row_min_sqdist, soft_match_backward, soft_match_score, GramPair, MatchConfig};
use wlrn::data::{BagTriplet, PatchBag};
use wlrn::net::{Architecture, DescriptorNet, Gradients, Patch};
use wlrn::tensor::{
    affine, affine_backward, conv2d, conv2d_backward, finite_diff_gradcheck, l2_normalize, l2_normalize_backward,
    maxpool2x2, maxpool2x2_backward, relu, relu_backward, Tensor,
};
use wlrn::training::{triplet_loss, triplet_loss_backward};

pub const H: f64 = 1e-6;

fn uniform(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check<F: Fn(&[f64]) -> f64>(f: F, analytic: &[f64], point: &[f64]) -> f64 {
    finite_diff_gradcheck(f, analytic, point, H).unwrap()
}

pub fn conv2d_worst(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let c_in = rng.random_range(1..4);
        let c_out = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let side = k + stride * rng.random_range(1..4);
        let x = Tensor::new(&[c_in, side, side], uniform(c_in * side * side, &mut rng)).unwrap();
        let w = Tensor::new(&[c_out, c_in, k, k], uniform(c_out * c_in * k * k, &mut rng)).unwrap();
        let b = Tensor::new(&[c_out], uniform(c_out, &mut rng)).unwrap();
        let out_len = conv2d(&x, &w, &b, stride).unwrap().len();
        let r = uniform(out_len, &mut rng);

        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        conv2d_backward(&x, &w, &b, stride, &r, Some(&mut gx), &mut gw, &mut gb).unwrap();

        let f_x = |p: &[f64]| {
            dot(
                &r,
                conv2d(&Tensor::new(x.shape(), p.to_vec()).unwrap(), &w, &b, stride)
                    .unwrap()
                    .data(),
            )
        };
        let f_w = |p: &[f64]| {
            dot(
                &r,
                conv2d(&x, &Tensor::new(w.shape(), p.to_vec()).unwrap(), &b, stride)
                    .unwrap()
                    .data(),
            )
        };
        let f_b = |p: &[f64]| {
            dot(
                &r,
                conv2d(&x, &w, &Tensor::new(b.shape(), p.to_vec()).unwrap(), stride)
                    .unwrap()
                    .data(),
            )
        };
        worst = worst
            .max(check(f_x, &gx, x.data()))
            .max(check(f_w, &gw, w.data()))
            .max(check(f_b, &gb, b.data()));
    }
    worst
}

pub fn relu_worst(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        // keep clear of the kink at zero
        let x: Vec<f64> = uniform(40, &mut rng)
            .into_iter()
            .map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v })
            .collect();
        let x = Tensor::from_vec(x);
        let r = uniform(40, &mut rng);
        let mut g = vec![0.0; 40];
        relu_backward(&x, &r, &mut g);
        let f = |p: &[f64]| dot(&r, relu(&Tensor::from_vec(p.to_vec())).data());
        worst = worst.max(check(f, &g, x.data()));
    }
    worst
}

pub fn maxpool_worst(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        // a shuffled grid of well separated values keeps every argmax stable
        let len = 3 * 8 * 6;
        let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
        for i in (1..len).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let x = Tensor::new(&[3, 8, 6], vals).unwrap();
        let r = uniform(3 * 4 * 3, &mut rng);
        let mut g = vec![0.0; len];
        maxpool2x2_backward(&x, &r, &mut g).unwrap();
        let f = |p: &[f64]| {
            dot(
                &r,
                maxpool2x2(&Tensor::new(&[3, 8, 6], p.to_vec()).unwrap())
                    .unwrap()
                    .data(),
            )
        };
        worst = worst.max(check(f, &g, x.data()));
    }
    worst
}

pub fn affine_worst(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (d_in, d_out) = (rng.random_range(1..20), rng.random_range(1..10));
        let x = Tensor::from_vec(uniform(d_in, &mut rng));
        let w = Tensor::new(&[d_out, d_in], uniform(d_out * d_in, &mut rng)).unwrap();
        let b = Tensor::from_vec(uniform(d_out, &mut rng));
        let r = uniform(d_out, &mut rng);
        let mut gx = vec![0.0; d_in];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; d_out];
        affine_backward(&x, &w, &b, &r, Some(&mut gx), &mut gw, &mut gb).unwrap();
        let f_x = |p: &[f64]| dot(&r, affine(&Tensor::from_vec(p.to_vec()), &w, &b).unwrap().data());
        let f_w = |p: &[f64]| {
            dot(
                &r,
                affine(&x, &Tensor::new(w.shape(), p.to_vec()).unwrap(), &b)
                    .unwrap()
                    .data(),
            )
        };
        let f_b = |p: &[f64]| dot(&r, affine(&x, &w, &Tensor::from_vec(p.to_vec())).unwrap().data());
        worst = worst
            .max(check(f_x, &gx, x.data()))
            .max(check(f_w, &gw, w.data()))
            .max(check(f_b, &gb, b.data()));
    }
    worst
}

pub fn l2_normalize_worst(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let d = rng.random_range(2..30);
        let x = Tensor::from_vec(uniform(d, &mut rng));
        let y = l2_normalize(&x).unwrap();
        let r = uniform(d, &mut rng);
        let mut g = vec![0.0; d];
        l2_normalize_backward(&x, &y, &r, &mut g);
        let f = |p: &[f64]| dot(&r, l2_normalize(&Tensor::from_vec(p.to_vec())).unwrap().data());
        worst = worst.max(check(f, &g, x.data()));
    }
    worst
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row = uniform(d, rng);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(&[n, d], data).unwrap()
}

/// Worst error and largest gradient entry seen, on 8×16 unit-row bags.
pub fn soft_match_worst(trials: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let (mut worst, mut largest) = (0.0f64, 0.0f64);
    for trial in 0..trials {
        let e1 = unit_rows(8, 16, &mut rng);
        let e2 = unit_rows(8, 16, &mut rng);
        let pair = GramPair::new(e1.clone(), e2.clone()).unwrap();
        // alternate the default constants with a threshold inside the bulk
        // of the distances, where the relaxed indicator is far from saturated
        let cfg = if trial % 2 == 0 {
            MatchConfig::default()
        } else {
            let mut mins = row_min_sqdist(&pair);
            mins.sort_by(f64::total_cmp);
            MatchConfig::new(mins[4], 20.0, 1e-6).unwrap()
        };
        let fwd = soft_match_score(&pair, &cfg);
        let upstream = rng.random_range(0.5..2.0);
        let (g1, g2) = soft_match_backward(&pair, &fwd, &cfg, upstream);
        largest = largest.max(g1.data().iter().chain(g2.data()).fold(0.0, |m, v| m.max(v.abs())));
        let score = |a: &Tensor, b: &Tensor| {
            upstream * soft_match_score(&GramPair::new(a.clone(), b.clone()).unwrap(), &cfg).score
        };
        let f1 = |p: &[f64]| score(&Tensor::new(&[8, 16], p.to_vec()).unwrap(), &e2);
        let f2 = |p: &[f64]| score(&e1, &Tensor::new(&[8, 16], p.to_vec()).unwrap());
        worst = worst
            .max(check(f1, g1.data(), e1.data()))
            .max(check(f2, g2.data(), e2.data()));
    }
    (worst, largest)
}

pub fn random_bag(rng: &mut ChaCha8Rng, object_id: u32, view_id: u32, n: usize) -> PatchBag {
    let patches = (0..n)
        .map(|_| {
            let px = (0..Patch::LEN).map(|_| rng.random::<f64>()).collect();
            Patch::new(Tensor::new(&[3, 32, 32], px).unwrap()).unwrap()
        })
        .collect();
    PatchBag {
        object_id,
        view_id,
        patches,
        keypoints: vec![(0.0, 0.0); n],
    }
}

/// Descriptor gradient of the reduced-width network for random patches.
pub fn descriptor_worst(trials: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let net = DescriptorNet::init_with(Architecture::REDUCED, 100 + trial);
        let patch = random_bag(&mut rng, 0, 0, 1).patches.remove(0);
        let r = uniform(net.descriptor_dim(), &mut rng);
        let acts = net.forward_traced(&patch).unwrap();
        let mut grads = Gradients::zeros(net.architecture());
        net.backward(&acts, &r, &mut grads).unwrap();
        let f = |p: &[f64]| {
            let mut n = net.clone();
            n.set_flat_params(p).unwrap();
            dot(&r, n.forward(&patch).unwrap().data())
        };
        worst = worst.max(check(f, &grads.flatten(), &net.flat_params()));
    }
    worst
}

/// Full triplet loss through the reduced-width network. Returns the error
/// and the largest analytic gradient entry.
pub fn triplet_worst() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let net = DescriptorNet::init_with(Architecture::REDUCED, 5);
    let (a, p, n) = (
        random_bag(&mut rng, 0, 0, 4),
        random_bag(&mut rng, 0, 1, 4),
        random_bag(&mut rng, 1, 0, 4),
    );
    let t = BagTriplet {
        anchor: &a,
        positive: &p,
        negative: &n,
    };
    // threshold placed among the actual distances so the loss is not flat
    let ea = net.forward_bag(&a.patches).unwrap();
    let ep = net.forward_bag(&p.patches).unwrap();
    let mut mins = row_min_sqdist(&GramPair::new(ea, ep).unwrap());
    mins.sort_by(f64::total_cmp);
    let cfg = MatchConfig::new(mins[2], 20.0, 1e-6).unwrap();

    let mut grads = Gradients::zeros(net.architecture());
    let loss = triplet_loss_backward(&net, &t, &cfg, &mut grads).unwrap();
    assert_eq!(loss, triplet_loss(&net, &t, &cfg).unwrap());
    let analytic = grads.flatten();
    let largest = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let f = |x: &[f64]| {
        let mut m = net.clone();
        m.set_flat_params(x).unwrap();
        triplet_loss(&m, &t, &cfg).unwrap()
    };
    // larger steps cross ReLU and pooling kinks of the piecewise-smooth loss
    (check(f, &analytic, &net.flat_params()), largest)
}
