//! Whole runs on a tiny pair: schedule audit, checkpoints and reproducibility.

use std::path::PathBuf;

use pairgan_core::augment::AugmentSpec;
use pairgan_core::{Shape, Volume};
use pairgan_nets::checkpoint::generator_to_bytes;
use pairgan_nets::{CriticConfig, GeneratorConfig};
use pairgan_train::ensemble::save_member;
use pairgan_train::{
    run_training, CriticDiagnostics, EnsembleMember, EpochStats, Footprint, GeneratorDiagnostics, Observer, PairData,
    TrainConfig, TrainError, TrainingSchedule,
};

fn pair() -> PairData {
    let s = Shape::new(16, 16, 6);
    let blob = |x: usize, y: usize, r: f64| ((x as f64 - 8.0).powi(2) + (y as f64 - 8.0).powi(2)).sqrt() < r;
    let t1 = Volume::from_fn(s, |x, y, _| if blob(x, y, 6.0) { 0.4 + 0.5 * blob(x, y, 2.0) as u8 as f32 } else { 0.0 });
    let t2 = Volume::from_fn(s, |x, y, _| if blob(x, y, 6.0) { 0.4 + 0.5 * blob(x, y, 3.0) as u8 as f32 } else { 0.0 });
    PairData::new(t1, t2).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        generator: GeneratorConfig { depth: 2, base_width: 2, input_size: (16, 16) },
        critic: CriticConfig { depth: 2, base_width: 2, input_size: (16, 16), leaky_slope: 0.2 },
        schedule: TrainingSchedule { total_epochs: epochs, noise_square_px: 4, ..Default::default() },
        augment: AugmentSpec { rotation_range_deg: 5.0, shift_range_vox: 1.0, noise_variance_max: 0.01, seed: 0 },
        ..Default::default()
    }
}

#[derive(Default)]
struct Audit {
    critic: Vec<usize>,
    generator: Vec<usize>,
    epochs: Vec<EpochStats>,
    checkpoints: Vec<(usize, Option<Footprint>)>,
}

impl Observer<f32> for Audit {
    fn critic_step(&mut self, epoch: usize, _: &CriticDiagnostics) {
        if self.critic.len() <= epoch {
            self.critic.resize(epoch + 1, 0);
        }
        self.critic[epoch] += 1;
    }
    fn generator_step(&mut self, epoch: usize, _: &GeneratorDiagnostics) {
        if self.generator.len() <= epoch {
            self.generator.resize(epoch + 1, 0);
        }
        self.generator[epoch] += 1;
    }
    fn epoch_end(&mut self, stats: &EpochStats) -> Result<(), TrainError> {
        self.epochs.push(*stats);
        Ok(())
    }
    fn checkpoint(&mut self, m: &EnsembleMember<f32>) -> Result<(), TrainError> {
        self.checkpoints.push((m.epoch, m.exclusion));
        Ok(())
    }
}

#[test]
fn thousand_epoch_run_follows_the_schedule_exactly() {
    let mut audit = Audit::default();
    let out = run_training::<f32>(&pair(), &config(1000), 3, &mut audit).unwrap();
    // schedule simulator written out independently
    let mut expected_total = 0;
    for e in 0..1000 {
        let want = if e < 25 || e % 100 == 0 { 100 } else { 5 };
        assert_eq!(audit.critic[e], want, "epoch {e}");
        assert_eq!(audit.generator[e], 1, "epoch {e}");
        assert_eq!(audit.epochs[e].critic_steps, want);
        expected_total += want;
    }
    assert_eq!(out.critic_updates, expected_total as u64);
    assert_eq!(out.generator_updates, 1000);
    let epochs: Vec<usize> = audit.checkpoints.iter().map(|c| c.0).collect();
    assert_eq!(epochs, vec![400, 600, 800, 1000]);
    assert_eq!(out.ensemble.members.len(), 4);
    assert!(out.history.iter().all(|s| s.critic_loss.is_finite() && s.generator_loss.is_finite()));
}

#[test]
fn exclusion_masks_are_the_phase_footprints() {
    let mut audit = Audit::default();
    let out = run_training::<f32>(&pair(), &config(10), 4, &mut audit).unwrap();
    let want = [(0.5, 0.5), (0.35, 0.35), (0.65, 0.65)];
    for (k, m) in out.ensemble.members.iter().enumerate() {
        assert_eq!(m.epoch, [4, 6, 8, 10][k]);
        if k < 3 {
            let fp = m.exclusion.unwrap();
            assert_eq!(fp, Footprint::centred(want[k], 4, 16, 16).unwrap());
            assert_eq!(fp.plane_mask(16, 16).iter().filter(|&&b| b).count(), 16);
        } else {
            assert!(m.exclusion.is_none());
        }
    }
    // phase 0 at (0.5, 0.5) on 16 px with a 4 px square starts at 6
    assert_eq!((out.ensemble.members[0].exclusion.unwrap().x0, out.ensemble.members[0].exclusion.unwrap().y0), (6, 6));
    let phases: Vec<_> = audit.epochs.iter().map(|s| s.phase).collect();
    assert_eq!(phases[3], Some(0));
    assert_eq!(phases[4], Some(1));
    assert_eq!(phases[7], Some(2));
    assert_eq!(phases[9], None);
}

fn bytes(out: &pairgan_train::TrainingOutcome<f32>) -> Vec<Vec<u8>> {
    out.ensemble.members.iter().map(|m| generator_to_bytes(&m.generator, serde_json::json!({})).unwrap()).collect()
}

#[test]
fn same_seed_same_ensemble() {
    let a = run_training::<f32>(&pair(), &config(10), 7, &mut ()).unwrap();
    let b = run_training::<f32>(&pair(), &config(10), 7, &mut ()).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(a.history, b.history);
    let c = run_training::<f32>(&pair(), &config(10), 8, &mut ()).unwrap();
    assert_ne!(bytes(&a), bytes(&c));
}

struct StopAfter {
    dir: PathBuf,
    epoch: usize,
}

impl Observer<f32> for StopAfter {
    fn epoch_end(&mut self, stats: &EpochStats) -> Result<(), TrainError> {
        if stats.epoch == self.epoch {
            return Err(TrainError::Config("stopped".into()));
        }
        Ok(())
    }
    fn checkpoint(&mut self, m: &EnsembleMember<f32>) -> Result<(), TrainError> {
        save_member(m, &self.dir).map(|_| ())
    }
}

#[test]
fn checkpoints_taken_before_an_abort_are_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut sink = StopAfter { dir: dir.path().to_path_buf(), epoch: 6 };
    assert!(run_training::<f32>(&pair(), &config(10), 9, &mut sink).is_err());
    let mut files: Vec<String> =
        std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, vec!["generator_epoch00004.ckpt", "generator_epoch00006.ckpt"]);
}

#[test]
fn mismatched_networks_are_rejected() {
    let mut cfg = config(10);
    cfg.generator.input_size = (32, 32);
    assert!(matches!(run_training::<f32>(&pair(), &cfg, 1, &mut ()), Err(TrainError::Config(_))));
}
