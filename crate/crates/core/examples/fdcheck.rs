use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsr_core::harness::config::ExperimentConfig;
use tsr_core::harness::pipeline;
use tsr_core::nets::{Codec, DenoiserNet};
use tsr_core::training;

fn main() -> tsr_core::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.corpus_dir = "/tmp/exp/corpus".into();
    cfg.data.n_train_pairs = 4;
    let data = pipeline::load_datasets(&cfg)?;
    let mut net = DenoiserNet::init(3, cfg.net_config())?;
    // make output head nonzero
    for (k, t) in net.params.iter_mut() { if k.starts_with("out") { *t = t.map(|_| 0.0).map(|v| v + 0.01); } }
    let ex = pipeline::extractor(&cfg);
    let cond = cfg.cond();
    let env = training::TrainEnv { codec: &Codec::Identity, extractor: &ex, scale: 4, noise_scale: 0.1, cond: &cond };
    let obj = training::TeacherObjective { percep_weight: 0.0, eps_weight: 0.0 };
    let batch: Vec<_> = data.train.iter().collect();
    let f = |n: &DenoiserNet| training::teacher_loss(n, &env, &obj, &batch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let out = f(&net);
    println!("loss {}", out.loss);
    for name in ["out.b", "out.w", "in.w", "block0.conv1.w", "block1.mod_scale.w", "cond.w"] {
        for idx in [0usize, 2] {
            let h = 1e-5;
            let mut p = net.clone(); p.params.get_mut(name).unwrap().data_mut()[idx] += h;
            let mut m = net.clone(); m.params.get_mut(name).unwrap().data_mut()[idx] -= h;
            let fd = (f(&p).loss - f(&m).loss) / (2.0 * h);
            let an = out.grads.get(name).map(|g| g.data()[idx]).unwrap_or(f64::NAN);
            println!("{name}[{idx}] fd {fd:.6e} an {an:.6e}");
        }
    }
    Ok(())
}
