//! Finite-difference verification of every graph op's backward pass.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxfuse::gradcheck::check_gradients;
use voxfuse::graph::{Graph, SamplePlan};
use voxfuse::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn probe(shape: &[usize], rng: &mut impl Rng) -> Arc<Tensor<f64>> {
    Arc::new(rand_tensor(shape, rng))
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

#[test]
fn grad_elementwise_chain() {
    let mut r = rng(1);
    let x = rand_tensor(&[3, 4], &mut r);
    let y = rand_tensor(&[3, 4], &mut r);
    let p = probe(&[3, 4], &mut r);
    let rep = check_gradients(
        &[x, y],
        |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let s = g.scale(s, 0.7);
            let s = g.sigmoid(s);
            let s = g.relu(s);
            g.dot_readout(s, p.clone())
        },
        STEP,
        64,
        &mut r,
    );
    assert!(rep.passes(TOL), "max rel err {}", rep.max_rel_err);
}

#[test]
fn grad_linear() {
    let mut r = rng(2);
    let x = rand_tensor(&[5, 3], &mut r);
    let w = rand_tensor(&[4, 3], &mut r);
    let b = rand_tensor(&[4], &mut r);
    let p = probe(&[5, 4], &mut r);
    let rep = check_gradients(
        &[x, w, b],
        |g, ids| {
            let y = g.linear(ids[0], ids[1], Some(ids[2]));
            g.dot_readout(y, p.clone())
        },
        STEP,
        64,
        &mut r,
    );
    assert!(rep.passes(TOL), "max rel err {}", rep.max_rel_err);
}

#[test]
fn grad_conv2d_strided() {
    let mut r = rng(3);
    let x = rand_tensor(&[2, 7, 6], &mut r);
    let w = rand_tensor(&[3, 2, 3, 3], &mut r);
    let b = rand_tensor(&[3], &mut r);
    let p = probe(&[3, 4, 3], &mut r);
    let rep = check_gradients(
        &[x, w, b],
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1);
            g.dot_readout(y, p.clone())
        },
        STEP,
        48,
        &mut r,
    );
    assert!(rep.passes(TOL), "max rel err {}", rep.max_rel_err);
}

#[test]
fn grad_conv3d_k3_and_k1() {
    let mut r = rng(4);
    let x = rand_tensor(&[2, 4, 3, 3], &mut r);
    let w3 = rand_tensor(&[2, 2, 3, 3, 3], &mut r);
    let w1 = rand_tensor(&[3, 2, 1, 1, 1], &mut r);
    let b = rand_tensor(&[3], &mut r);
    let p = probe(&[3, 4, 3, 3], &mut r);
    let rep = check_gradients(
        &[x, w3, w1, b],
        |g, ids| {
            let y = g.conv3d(ids[0], ids[1], None, 1);
            let y = g.relu(y);
            let y = g.conv3d(y, ids[2], Some(ids[3]), 0);
            g.dot_readout(y, p.clone())
        },
        STEP,
        48,
        &mut r,
    );
    assert!(rep.passes(TOL), "max rel err {}", rep.max_rel_err);
}

#[test]
fn grad_gates_and_pools() {
    let mut r = rng(5);
    let vol = rand_tensor(&[2, 4, 2, 2], &mut r);
    let gate2d = rand_tensor(&[2, 4, 2], &mut r);
    let chan = rand_tensor(&[2], &mut r);
    let p = probe(&[2, 2, 1, 1], &mut r);
    let rep = check_gradients(
        &[vol, gate2d, chan],
        |g, ids| {
            let gated = g.bev_gate(ids[0], ids[1]);
            let gated = g.channel_gate(gated, ids[2]);
            let down = g.avg_down3d(gated);
            g.dot_readout(down, p.clone())
        },
        STEP,
        64,
        &mut r,
    );
    assert!(rep.passes(TOL), "max rel err {}", rep.max_rel_err);

    let mut r = rng(6);
    let vol = rand_tensor(&[3, 2, 2, 4], &mut r);
    let pz = probe(&[3, 2, 2], &mut r);
    let rep = check_gradients(
        &[vol.clone()],
        |g, ids| {
            let bev = g.mean_z(ids[0]);
            g.dot_readout(bev, pz.clone())
        },
        STEP,
        64,
        &mut r,
    );
    assert!(rep.passes(TOL));

    let pg = probe(&[3], &mut r);
    let rep = check_gradients(
        &[vol],
        |g, ids| {
            let sq = g.global_avg_pool(ids[0]);
            g.dot_readout(sq, pg.clone())
        },
        STEP,
        64,
        &mut r,
    );
    assert!(rep.passes(TOL));
}

#[test]
fn grad_upsample_concat() {
    let mut r = rng(7);
    let a = rand_tensor(&[2, 2, 2, 1], &mut r);
    let b = rand_tensor(&[1, 4, 4, 2], &mut r);
    let p = probe(&[3, 4, 4, 2], &mut r);
    let rep = check_gradients(
        &[a, b],
        |g, ids| {
            let up = g.upsample3d(ids[0]);
            let cat = g.concat_c(&[up, ids[1]]);
            g.dot_readout(cat, p.clone())
        },
        STEP,
        64,
        &mut r,
    );
    assert!(rep.passes(TOL), "max rel err {}", rep.max_rel_err);
}

#[test]
fn grad_voxel_rows_scatter() {
    let mut r = rng(8);
    let rows = rand_tensor(&[3, 4, 2], &mut r);
    let counts = Arc::new(vec![1usize, 3, 4]);
    let cells = Arc::new(vec![0u32, 5, 11]);
    let p = probe(&[4, 2, 3, 2], &mut r);
    let rep = check_gradients(
        &[rows],
        |g, ids| {
            let pooled = g.masked_max_rows(ids[0], counts.clone());
            let appended = g.append_pooled(ids[0], pooled);
            let pooled2 = g.masked_max_rows(appended, counts.clone());
            let vol = g.scatter_voxels(pooled2, cells.clone(), [2, 3, 2]);
            g.dot_readout(vol, p.clone())
        },
        STEP,
        64,
        &mut r,
    );
    assert!(rep.passes(TOL), "max rel err {}", rep.max_rel_err);
}

#[test]
fn grad_camera_sample() {
    let mut r = rng(9);
    let m0 = rand_tensor(&[2, 3, 4], &mut r);
    let m1 = rand_tensor(&[2, 3, 4], &mut r);
    // Hand-built plan: 4 voxels, mixed camera taps.
    let plan = Arc::new(SamplePlan {
        dims: [2, 2, 1],
        map_h: 3,
        map_w: 4,
        voxel_offsets: vec![0, 2, 4, 4, 7],
        entries: vec![
            (0, 0, 0.25),
            (0, 1, 0.75),
            (1, 5, 0.5),
            (1, 6, 0.5),
            (0, 11, 0.4),
            (1, 2, 0.3),
            (1, 3, 0.3),
        ],
    });
    let p = probe(&[2, 2, 2, 1], &mut r);
    let rep = check_gradients(
        &[m0, m1],
        |g, ids| {
            let vol = g.camera_sample(&[ids[0], ids[1]], plan.clone());
            g.dot_readout(vol, p.clone())
        },
        STEP,
        64,
        &mut r,
    );
    assert!(rep.passes(TOL), "max rel err {}", rep.max_rel_err);
}

#[test]
fn grad_softmax_and_losses() {
    let mut r = rng(10);
    let cls = 3;
    let v = 4;
    let logits = rand_tensor(&[cls, v], &mut r);
    let labels: Arc<Vec<u16>> = Arc::new((0..v).map(|_| r.gen_range(0..cls) as u16).collect());
    let alpha = Arc::new(vec![1.0f64; cls]);

    let rep = check_gradients(
        &[logits.clone()],
        |g, ids| g.focal_loss(ids[0], labels.clone(), 2.0, alpha.clone()),
        1e-6,
        64,
        &mut r,
    );
    assert!(rep.passes(TOL), "focal: max rel err {}", rep.max_rel_err);

    let labels2 = labels.clone();
    let rep = check_gradients(
        &[logits.clone()],
        |g, ids| {
            let probs = g.softmax_classes(ids[0]);
            g.lovasz_softmax(probs, labels2.clone())
        },
        1e-6,
        64,
        &mut r,
    );
    assert!(rep.passes(TOL), "lovasz: max rel err {}", rep.max_rel_err);

    for semantic in [false, true] {
        let labels3 = labels.clone();
        let rep = check_gradients(
            &[logits.clone()],
            |g, ids| {
                let probs = g.softmax_classes(ids[0]);
                g.scal_loss(probs, labels3.clone(), semantic)
            },
            1e-6,
            64,
            &mut r,
        );
        assert!(
            rep.passes(TOL),
            "scal semantic={semantic}: max rel err {}",
            rep.max_rel_err
        );
    }
}

#[test]
fn grad_weighted_sum_of_losses() {
    let mut r = rng(11);
    let cls = 2;
    let v = 6;
    let logits = rand_tensor(&[cls, v], &mut r);
    let labels: Arc<Vec<u16>> = Arc::new((0..v).map(|_| r.gen_range(0..cls) as u16).collect());
    let alpha = Arc::new(vec![1.0f64; cls]);
    let rep = check_gradients(
        &[logits],
        |g, ids| {
            let probs = g.softmax_classes(ids[0]);
            let f = g.focal_loss(ids[0], labels.clone(), 2.0, alpha.clone());
            let l = g.lovasz_softmax(probs, labels.clone());
            let s1 = g.scal_loss(probs, labels.clone(), false);
            let s2 = g.scal_loss(probs, labels.clone(), true);
            g.weighted_sum(&[(f, 1.0), (l, 0.5), (s1, 0.25), (s2, 0.125)])
        },
        1e-6,
        64,
        &mut r,
    );
    assert!(rep.passes(TOL), "max rel err {}", rep.max_rel_err);
}

#[test]
fn shared_leaf_accumulates_both_paths() {
    // One leaf consumed twice must receive the sum of both path gradients.
    let x = Tensor::from_vec(&[2], vec![0.3f64, -0.2]);
    let mut g = Graph::new();
    let xid = g.leaf(x, true);
    let a = g.scale(xid, 2.0);
    let b = g.scale(xid, 3.0);
    let s = g.add(a, b);
    let root = g.sum_all(s);
    let grads = g.backward(root, None);
    let gx = grads.of(xid).unwrap();
    assert_eq!(gx.data(), &[5.0, 5.0]);
}
