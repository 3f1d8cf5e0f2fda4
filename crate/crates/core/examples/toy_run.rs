//! Runs the full toy pipeline and prints held-out metrics per stage.
//!
//! Usage: `cargo run --example toy_run -p tsr-core [config.toml]`

use std::time::Instant;

use tsr_core::harness::config::{parse_config, ExperimentConfig};
use tsr_core::harness::pipeline;
use tsr_core::training::Stage;

fn main() -> tsr_core::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => parse_config(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    pipeline::ensure_corpus(&cfg)?;
    let data = pipeline::load_datasets(&cfg)?;
    let codec = pipeline::build_codec(&cfg, &data.train)?;
    let clock = Instant::now();
    let (tf, _) = pipeline::train_teacher(&cfg, Stage::TeacherF, &data, &codec, None)?;
    let (tr, _) = pipeline::train_teacher(&cfg, Stage::TeacherR, &data, &codec, None)?;
    println!("teachers {:.1}s", clock.elapsed().as_secs_f64());
    for (name, m) in [("teacher_f", &tf), ("teacher_r", &tr)] {
        let r = pipeline::evaluate_model(&cfg, m, &data.eval, 0.0)?;
        println!("{name:10} psnr {:.4} ssim {:.4} percep {:.5} fid {:.5}", r.psnr, r.ssim, r.percep, r.toy_fid);
    }
    let (s1, _) = pipeline::distill_stage1(&cfg, &data, &tf, &tr, None)?;
    let mut ablate = cfg.clone();
    ablate.weights.lambda_fl = 0.0;
    ablate.weights.lambda_rn = 0.0;
    let (s1a, _) = pipeline::distill_stage1(&ablate, &data, &tf, &tr, None)?;
    println!("stage1 {:.1}s", clock.elapsed().as_secs_f64());
    for (name, m) in [("stage1", &s1), ("ablation", &s1a)] {
        let r = pipeline::evaluate_model(&cfg, m, &data.eval, 0.0)?;
        println!("{name:10} psnr {:.4} ssim {:.4} percep {:.5} fid {:.5}", r.psnr, r.ssim, r.percep, r.toy_fid);
    }
    let (s2, _) = pipeline::distill_stage2(&cfg, &data, &s1, None)?;
    println!("stage2 {:.1}s", clock.elapsed().as_secs_f64());
    for r in pipeline::sweep_t_model(&cfg, &s2, &data.eval)? {
        println!("t={:.1} psnr {:.4} ssim {:.4} percep {:.5} fid {:.5}", r.key, r.psnr, r.ssim, r.percep, r.toy_fid);
    }
    Ok(())
}
