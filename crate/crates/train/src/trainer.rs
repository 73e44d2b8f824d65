//! The adversarial loop: critic and generator updates, epochs and a full run
//! ending in a checkpoint ensemble.

use pairgan_core::augment::AugmentSpec;
use pairgan_nets::{
    fake_t2, Adam, Critic, CriticConfig, Generator, GeneratorConfig, Parameterized, Real, SliceBatch,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_views, PairData, ViewSpec};
use crate::ensemble::{CheckpointEnsemble, EnsembleMember};
use crate::error::TrainError;
use crate::noise::{NoiseConfig, NoiseSquare};
use crate::schedule::{OptimizerConfig, TrainingSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub schedule: TrainingSchedule,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentSpec,
    pub augment_t2: bool,
    pub noise: NoiseConfig,
    /// Start the generator from the zero map.
    pub zero_init_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            critic: CriticConfig::default(),
            schedule: TrainingSchedule::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentSpec::default(),
            augment_t2: true,
            noise: NoiseConfig::default(),
            zero_init_head: true,
        }
    }
}

impl TrainConfig {
    /// Checks every part, and that both networks take `(height, width)` slices.
    pub fn validate(&self, plane: (usize, usize)) -> Result<(), TrainError> {
        self.generator.validate()?;
        self.critic.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        self.noise.validate()?;
        if self.generator.input_size != plane || self.critic.input_size != plane {
            return Err(TrainError::Config(format!(
                "networks take {:?} (generator) and {:?} (critic) slices but the volumes have {plane:?}",
                self.generator.input_size, self.critic.input_size
            )));
        }
        for &pos in &self.schedule.noise_positions {
            crate::noise::Footprint::centred(pos, self.schedule.noise_square_px, plane.0, plane.1)?;
        }
        Ok(())
    }
}

/// Independent 64-bit seed for component `tag` of a run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

const TAG_GENERATOR: u64 = 1;
const TAG_CRITIC: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_STEPS: u64 = 16;

/// Networks, optimizers and counters owned by the loop.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub generator: Generator<T>,
    pub critic: Critic<T>,
    pub adam_generator: Adam<T>,
    pub adam_critic: Adam<T>,
    pub critic_updates: u64,
    pub generator_updates: u64,
    step_seed: u64,
    /// Every step draws from its own stream of the step seed.
    steps_drawn: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        let mut generator = Generator::new(config.generator, derive_seed(seed, TAG_GENERATOR))?;
        if config.zero_init_head {
            generator.zero_head();
        }
        Ok(Self::from_parts(
            config,
            generator,
            Critic::new(config.critic, derive_seed(seed, TAG_CRITIC))?,
            seed,
        ))
    }

    pub fn from_parts(config: TrainConfig, generator: Generator<T>, critic: Critic<T>, seed: u64) -> Self {
        Self {
            config,
            generator,
            critic,
            adam_generator: Adam::new(config.optimizer.adam()),
            adam_critic: Adam::new(config.optimizer.adam()),
            critic_updates: 0,
            generator_updates: 0,
            step_seed: derive_seed(seed, TAG_STEPS),
            steps_drawn: 0,
        }
    }

    fn next_step_rng(&mut self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.step_seed);
        rng.set_stream(self.steps_drawn);
        self.steps_drawn += 1;
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticDiagnostics {
    /// `E[C(fake)] - E[C(real)] + penalty`
    pub loss: f64,
    /// `E[C(real)] - E[C(fake)]`
    pub wasserstein: f64,
    pub penalty: f64,
    pub mean_grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorDiagnostics {
    /// `-E[C(t1 + G(t1))]`
    pub loss: f64,
    pub mean_abs_map: f64,
}

fn grads_finite<T: Real>(model: &impl Parameterized<T>) -> bool {
    let mut ok = true;
    model.visit_params(&mut |p| ok &= p.grad.iter().all(|g| g.as_f64().is_finite()));
    ok
}

fn mean<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len() as f64
}

/// One optimizer step on the critic. The generator is not touched.
pub fn critic_step<T: Real, R: Rng + ?Sized>(
    state: &mut TrainState<T>,
    real: &SliceBatch<T>,
    fake: &SliceBatch<T>,
    rng: &mut R,
) -> Result<CriticDiagnostics, TrainError> {
    if real.shape() != fake.shape() || real.batch == 0 {
        return Err(TrainError::Grid(format!("real batch {:?} and fake batch {:?} differ", real.shape(), fake.shape())));
    }
    let n = real.batch;
    let both = SliceBatch::new(2 * n, real.height, real.width, [&real.values[..], &fake.values[..]].concat())?;
    let critic = &mut state.critic;
    critic.zero_grad();
    let (scores, cache) = critic.forward(&both)?;
    let (real_mean, fake_mean) = (mean(&scores[..n]), mean(&scores[n..]));
    let inv = T::from_f64(1.0 / n as f64);
    let d: Vec<T> = (0..2 * n).map(|i| if i < n { -inv } else { inv }).collect();
    critic.backward_params(&cache, &d);
    drop(cache);

    let mut interp = real.clone();
    for i in 0..n {
        let eps = T::from_f64(rng.random::<f64>());
        for (x, &f) in interp.item_mut(i).iter_mut().zip(fake.item(i)) {
            *x = eps * *x + (T::one() - eps) * f;
        }
    }
    let pen = critic.gradient_penalty(&interp, state.config.optimizer.gp_lambda, true)?;
    let diag = CriticDiagnostics {
        loss: fake_mean - real_mean + pen.value,
        wasserstein: real_mean - fake_mean,
        penalty: pen.value,
        mean_grad_norm: pen.grad_norms.iter().sum::<f64>() / n as f64,
    };
    if !diag.loss.is_finite() || !grads_finite(critic) {
        return Err(TrainError::NonFinite {
            what: "critic loss",
            snapshot: format!("{diag:?} after {} critic updates", state.critic_updates),
        });
    }
    state.adam_critic.step(critic);
    state.critic_updates += 1;
    Ok(diag)
}

/// One optimizer step on the generator against the current critic. The
/// critic's parameters and gradients are not touched.
pub fn generator_step<T: Real>(state: &mut TrainState<T>, t1: &SliceBatch<T>) -> Result<GeneratorDiagnostics, TrainError> {
    let n = t1.batch;
    if n == 0 {
        return Err(TrainError::Grid("empty generator batch".into()));
    }
    let g = &mut state.generator;
    g.zero_grad();
    let (map, cache) = g.forward_train(t1, true)?;
    let fake = fake_t2(t1, &map)?;
    let (scores, c_cache) = state.critic.forward(&fake)?;
    let diag = GeneratorDiagnostics {
        loss: -mean(&scores),
        mean_abs_map: map.values.iter().map(|v| v.as_f64().abs()).sum::<f64>() / map.values.len() as f64,
    };
    if !diag.loss.is_finite() {
        return Err(TrainError::NonFinite {
            what: "generator loss",
            snapshot: format!("{diag:?} after {} generator updates", state.generator_updates),
        });
    }
    // d(loss)/d(fake) is also d(loss)/d(map) since fake = t1 + map
    let d_fake = state.critic.input_grad(&c_cache, &vec![T::from_f64(-1.0 / n as f64); n]);
    g.backward(&cache, &d_fake);
    if !grads_finite(g) {
        return Err(TrainError::NonFinite {
            what: "generator gradient",
            snapshot: format!("{diag:?} after {} generator updates", state.generator_updates),
        });
    }
    state.adam_generator.step(g);
    state.generator_updates += 1;
    Ok(diag)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: Option<usize>,
    pub critic_steps: usize,
    pub generator_steps: usize,
    pub critic_loss: f64,
    pub wasserstein: f64,
    pub penalty: f64,
    pub generator_loss: f64,
    pub mean_abs_map: f64,
}

/// Hooks called by the loop. Every method has a no-op default.
pub trait Observer<T> {
    fn critic_step(&mut self, _epoch: usize, _diag: &CriticDiagnostics) {}
    fn generator_step(&mut self, _epoch: usize, _diag: &GeneratorDiagnostics) {}
    /// Called after every epoch; an error stops the run.
    fn epoch_end(&mut self, _stats: &EpochStats) -> Result<(), TrainError> {
        Ok(())
    }
    /// Called as soon as a checkpoint exists; an error aborts the run.
    fn checkpoint(&mut self, _member: &EnsembleMember<T>) -> Result<(), TrainError> {
        Ok(())
    }
}

impl<T> Observer<T> for () {}

/// The noise squares of the three phases, each drawn once from the run seed.
pub fn phase_squares(config: &TrainConfig, seed: u64) -> [NoiseSquare; 3] {
    let s = &config.schedule;
    std::array::from_fn(|k| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_NOISE));
        rng.set_stream(k as u64);
        NoiseSquare::sample(s.noise_positions[k], s.noise_square_px, &config.noise, &mut rng)
    })
}

/// The critic updates scheduled for `index`, then one generator update.
/// `square` is the noise square of the current phase, if any.
pub fn epoch<T: Real>(
    state: &mut TrainState<T>,
    data: &PairData,
    index: usize,
    square: Option<&NoiseSquare>,
    observer: &mut dyn Observer<T>,
) -> Result<EpochStats, TrainError> {
    let cfg = state.config;
    let inactive = NoiseSquare::inactive();
    let spec = ViewSpec {
        augment: &cfg.augment,
        augment_t2: cfg.augment_t2,
        noise: square.unwrap_or(&inactive),
        noise_target: cfg.noise.target,
    };
    let n = cfg.optimizer.batch_size;
    let steps = cfg.schedule.critic_steps(index);
    let (mut loss, mut wd, mut pen) = (0.0, 0.0, 0.0);
    for _ in 0..steps {
        let mut rng = state.next_step_rng();
        let (t1, real) = sample_views::<T, _>(data, &spec, n, true, &mut rng)?;
        let fake = fake_t2(&t1, &state.generator.forward_batch_stats(&t1)?)?;
        let d = critic_step(state, &real, &fake, &mut rng)?;
        observer.critic_step(index, &d);
        loss += d.loss;
        wd += d.wasserstein;
        pen += d.penalty;
    }
    let mut rng = state.next_step_rng();
    let (t1, _) = sample_views::<T, _>(data, &spec, n, false, &mut rng)?;
    let g = generator_step(state, &t1)?;
    observer.generator_step(index, &g);
    let k = steps as f64;
    Ok(EpochStats {
        epoch: index,
        phase: cfg.schedule.phase(index),
        critic_steps: steps,
        generator_steps: 1,
        critic_loss: loss / k,
        wasserstein: wd / k,
        penalty: pen / k,
        generator_loss: g.loss,
        mean_abs_map: g.mean_abs_map,
    })
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome<T> {
    pub ensemble: CheckpointEnsemble<T>,
    pub history: Vec<EpochStats>,
    pub critic_updates: u64,
    pub generator_updates: u64,
}

/// Train on one pair from scratch and return the four checkpoints. The
/// observer sees each checkpoint as soon as it is taken, so a sink can flush
/// it before a later failure.
pub fn run_training<T: Real>(
    data: &PairData,
    config: &TrainConfig,
    seed: u64,
    observer: &mut dyn Observer<T>,
) -> Result<TrainingOutcome<T>, TrainError> {
    config.validate(data.plane())?;
    crate::alloc::tune();
    let (h, w) = data.plane();
    let mut state = TrainState::<T>::new(*config, seed)?;
    let squares = phase_squares(config, seed);
    let checkpoints = config.schedule.checkpoint_epochs();
    let mut members = Vec::with_capacity(4);
    let mut history = Vec::with_capacity(config.schedule.total_epochs);
    for e in 0..config.schedule.total_epochs {
        let square = config.schedule.phase(e).map(|p| &squares[p]);
        let stats = epoch(&mut state, data, e, square, observer)
            .map_err(|err| TrainError::AtEpoch { epoch: e, source: Box::new(err) })?;
        history.push(stats);
        if let Some(k) = checkpoints.iter().position(|&c| c == e + 1) {
            let exclusion = if k < 3 { Some(squares[k].footprint(h, w)?) } else { None };
            let member = EnsembleMember { epoch: e + 1, exclusion, generator: state.generator.clone() };
            observer.checkpoint(&member)?;
            members.push(member);
        }
        observer.epoch_end(&stats)?;
    }
    Ok(TrainingOutcome {
        ensemble: CheckpointEnsemble::new(members, (h, w))?,
        history,
        critic_updates: state.critic_updates,
        generator_updates: state.generator_updates,
    })
}

/// Per-epoch loss curves as CSV.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out =
        String::from("epoch,phase,critic_steps,generator_steps,critic_loss,wasserstein,penalty,generator_loss,mean_abs_map\n");
    for s in history {
        let phase = s.phase.map(|p| p.to_string()).unwrap_or_else(|| "none".into());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.epoch, phase, s.critic_steps, s.generator_steps, s.critic_loss, s.wasserstein, s.penalty, s.generator_loss,
            s.mean_abs_map
        ));
    }
    out
}
