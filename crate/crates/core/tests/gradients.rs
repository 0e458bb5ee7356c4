use mmdenoise::model::{Ablation, CrossWeighting, Model, ModelConfig};
use mmdenoise::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inputs(seed: u64, n: usize, dims: &[usize], classes: usize) -> (Vec<Matrix>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = dims
        .iter()
        .map(|&d| Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let labels = (0..n).map(|i| i % classes).collect();
    (xs, labels)
}

/// Zero-initialised biases can put ReLU units exactly on their kink for rows
/// with an all-zero latent; jitter every parameter away from that.
fn jittered(dims: &[usize], cfg: ModelConfig, seed: u64) -> Model {
    let mut model = Model::new(dims, 3, cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
    let p: Vec<f64> = model.params().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    model.set_params(&p).unwrap();
    model
}

fn config(ablation: Ablation) -> ModelConfig {
    let mut cfg = ModelConfig {
        latent_dim: 4,
        hidden_dim: 5,
        ablation,
        train_iterations: 3,
        ..ModelConfig::default()
    };
    cfg.ttce.step = 0.05;
    cfg
}

/// Central differences on five parameters of every network.
fn check(ablation: Ablation, seed: u64) {
    let dims = [6, 3];
    let (xs, labels) = inputs(seed, 18, &dims, 3);
    let mut model = jittered(&dims, config(ablation), seed);
    model.refresh(&xs).unwrap();
    let out = model.batch_gradients(&xs, &labels, CrossWeighting::Unit, None).unwrap();
    let schedule = out.schedule.clone();
    let analytic = out.grads.flatten();
    let base = model.params();
    let sizes: Vec<usize> = model.nets().iter().map(|n| n.num_params()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut offset = 0;
    let mut worst: f64 = 0.0;
    for (net, &size) in sizes.iter().enumerate() {
        for _ in 0..5 {
            let k = offset + rng.random_range(0..size);
            let h = 1e-6;
            let mut p = base.clone();
            p[k] += h;
            model.set_params(&p).unwrap();
            let up = model.batch_loss(&xs, &labels, Some(&schedule)).unwrap().total();
            p[k] -= 2.0 * h;
            model.set_params(&p).unwrap();
            let down = model.batch_loss(&xs, &labels, Some(&schedule)).unwrap().total();
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-2);
            assert!(err < 1e-4, "{ablation:?} net {net} param {k}: fd {fd} analytic {}", analytic[k]);
            worst = worst.max(err);
        }
        offset += size;
    }
    model.set_params(&base).unwrap();
    assert!(worst.is_finite());
}

#[test]
fn total_loss_gradient_full_model() {
    check(Ablation::full(), 1);
    check(Ablation::full(), 2);
}

#[test]
fn total_loss_gradient_without_enhancement() {
    check(Ablation::without_ttce(), 3);
}

#[test]
fn total_loss_gradient_without_experts() {
    check(Ablation::without_ttce_saca(), 4);
}

#[test]
fn total_loss_gradient_plain_path() {
    check(Ablation::none(), 5);
}

#[test]
fn total_loss_gradient_strict_alignment() {
    check(
        Ablation {
            strict_alignment: true,
            ..Ablation::full()
        },
        6,
    );
}

#[test]
fn total_loss_gradient_pre_enhancement_fusion() {
    let dims = [6, 3];
    let (xs, labels) = inputs(7, 18, &dims, 3);
    let mut cfg = config(Ablation::full());
    cfg.fuse_after_ttce = false;
    let mut model = jittered(&dims, cfg, 7);
    model.refresh(&xs).unwrap();
    let out = model.batch_gradients(&xs, &labels, CrossWeighting::Unit, None).unwrap();
    let g = out.grads.flatten();
    let base = model.params();
    let h = 1e-6;
    for k in [0, base.len() / 3, base.len() / 2, base.len() - 1] {
        let mut p = base.clone();
        p[k] += h;
        model.set_params(&p).unwrap();
        let up = model.batch_loss(&xs, &labels, None).unwrap().total();
        p[k] -= 2.0 * h;
        model.set_params(&p).unwrap();
        let down = model.batch_loss(&xs, &labels, None).unwrap().total();
        let fd = (up - down) / (2.0 * h);
        assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(g[k].abs()).max(1e-2), "param {k}: fd {fd} analytic {}", g[k]);
    }
}
