//! GEPNet and GPICNet: the EP and BPIC iterations with the Gaussian cavity
//! replaced by the GNN readout.
//!
//! Both loops are generic over a [`CavitySource`]. Plugging in
//! [`GaussianCavity`] turns them back into plain EP and BPIC, which is how the
//! wiring is tested.

use std::sync::Arc;

use crate::cavity::{discrete_moments, CavityDistribution};
use crate::detect::{
    dsc_update, ep_estimate, BpicState, BpicSystem, DetectionResult, Detector, EpSystem, IterationTrace,
};
use crate::error::{Error, Result};
use crate::gnn::{
    gnn_forward, gnn_forward_taped, gnn_init, gnn_init_taped, EdgeAttributes, GnnParams, GnnState, GnnTape,
    NodeAttributes,
};
use crate::model::{Constellation, SystemInstance};

/// Produces the per-user belief handed to the estimation module.
pub trait CavitySource {
    /// `t` counts detector iterations from 1; `means` and `vars` are the
    /// observation module's outputs for this iteration.
    fn cavity(&mut self, t: usize, means: &[f64], vars: &[f64]) -> Result<CavityDistribution>;
}

/// The classical choice: the Gaussian evaluated on the constellation.
pub struct GaussianCavity<'a> {
    pub constellation: &'a Constellation,
}

impl CavitySource for GaussianCavity<'_> {
    fn cavity(&mut self, _t: usize, means: &[f64], vars: &[f64]) -> Result<CavityDistribution> {
        Ok(CavityDistribution::discretized_gaussian(means, vars, self.constellation))
    }
}

/// GNN refinement whose state carries over between detector iterations.
pub struct GnnCavity<'a> {
    params: &'a GnnParams,
    edges: EdgeAttributes,
    state: Option<GnnState>,
    tape: Option<GnnTape>,
}

impl<'a> GnnCavity<'a> {
    pub fn new(inst: &SystemInstance, params: &'a GnnParams) -> Result<Self> {
        check_constellation(params, &inst.constellation)?;
        Ok(Self {
            params,
            edges: EdgeAttributes::from_instance(inst),
            state: None,
            tape: None,
        })
    }

    /// Records a tape for [`crate::gnn::gnn_backward`]. The node attributes
    /// enter the tape as constants: no gradient flows back through the
    /// observation module.
    pub fn recording(inst: &SystemInstance, params: &'a GnnParams) -> Result<Self> {
        let mut s = Self::new(inst, params)?;
        s.tape = Some(GnnTape::new(&s.edges, params.dims));
        Ok(s)
    }

    pub fn into_tape(self) -> Option<GnnTape> {
        self.tape
    }
}

impl CavitySource for GnnCavity<'_> {
    fn cavity(&mut self, t: usize, means: &[f64], vars: &[f64]) -> Result<CavityDistribution> {
        // u is seeded from the channel only once; later iterations reuse the carried state.
        if t == 1 || self.state.is_none() {
            self.state = Some(match &mut self.tape {
                Some(tape) => gnn_init_taped(&self.edges, self.params, tape),
                None => gnn_init(&self.edges, self.params),
            });
        }
        let attrs = NodeAttributes::new(means, vars);
        let state = self.state.as_ref().expect("initialized above");
        let (q, next) = match &mut self.tape {
            Some(tape) => gnn_forward_taped(&self.edges, &attrs, state, self.params, tape)?,
            None => gnn_forward(&self.edges, &attrs, state, self.params)?,
        };
        self.state = Some(next);
        Ok(q)
    }
}

fn check_constellation(params: &GnnParams, c: &Constellation) -> Result<()> {
    if params.dims.m != c.m() {
        return Err(Error::DimensionMismatch {
            what: "constellation size".into(),
            found: params.dims.m,
            expected: c.m(),
        });
    }
    Ok(())
}

/// Detector output plus the cavity of the last iteration and, when tracing,
/// of every iteration.
#[derive(Debug, Clone)]
pub struct NeuralRun {
    pub result: DetectionResult,
    pub final_cavity: CavityDistribution,
    pub cavities: Vec<CavityDistribution>,
}

/// EP loop with an arbitrary cavity source.
pub fn gepnet_run<S: CavitySource>(
    inst: &SystemInstance,
    iterations: usize,
    damping: f64,
    trace: bool,
    source: &mut S,
) -> Result<NeuralRun> {
    if iterations == 0 {
        return Err(Error::Config("GEPNet needs at least one iteration".into()));
    }
    if !(0.0..=1.0).contains(&damping) {
        return Err(Error::Config(format!("damping {damping} outside [0, 1]")));
    }
    let c = &*inst.constellation;
    let k = inst.k();
    let sys = EpSystem::new(inst);
    let mut gamma = vec![0.0; k];
    let mut lambda = vec![1.0 / c.es_real; k];
    let mut soft = Vec::with_capacity(iterations);
    let mut traces = Vec::new();
    let mut cavities = Vec::new();
    let mut last = None;

    for t in 1..=iterations {
        let obs = sys.observe(&gamma, &lambda)?;
        let q = source.cavity(t, &obs.x_obs, &obs.v_obs)?;
        let (x_hat, v_hat) = discrete_moments(&q, c);
        let (g, l) = ep_estimate(&x_hat, &v_hat, &obs.x_obs, &obs.v_obs, &gamma, &lambda, damping);
        if trace {
            traces.push(IterationTrace {
                cavity_mean: obs.x_obs,
                cavity_var: obs.v_obs,
                post_mean: obs.mu_post,
                post_var: obs.sigma_post,
                x_hat: x_hat.clone(),
                v_hat,
            });
            cavities.push(q.clone());
        }
        gamma = g;
        lambda = l;
        soft.push(x_hat);
        last = Some(q);
    }
    Ok(NeuralRun {
        result: DetectionResult::from_soft(soft, traces, c),
        final_cavity: last.expect("at least one iteration"),
        cavities,
    })
}

/// BPIC loop with an arbitrary cavity source. No damping beyond DSC.
pub fn gpicnet_run<S: CavitySource>(
    inst: &SystemInstance,
    iterations: usize,
    initial_variance: f64,
    trace: bool,
    source: &mut S,
) -> Result<NeuralRun> {
    if iterations == 0 {
        return Err(Error::Config("GPICNet needs at least one iteration".into()));
    }
    let c = &*inst.constellation;
    let sys = BpicSystem::new(inst)?;
    let mut state = BpicState::initial(inst.k(), initial_variance);
    let mut soft = Vec::with_capacity(iterations);
    let mut traces = Vec::new();
    let mut cavities = Vec::new();
    let mut last = None;

    for t in 1..=iterations {
        let (mu, sigma) = sys.observe(&state.x_hat, &state.v_hat);
        let q = source.cavity(t, &mu, &sigma)?;
        let (x_new, v_new) = discrete_moments(&q, c);
        dsc_update(&sys, x_new, v_new, &mut state);
        if trace {
            traces.push(IterationTrace {
                cavity_mean: mu.clone(),
                cavity_var: sigma.clone(),
                post_mean: mu,
                post_var: sigma,
                x_hat: state.x_hat.clone(),
                v_hat: state.v_hat.clone(),
            });
            cavities.push(q.clone());
        }
        soft.push(state.x_hat.clone());
        last = Some(q);
    }
    Ok(NeuralRun {
        result: DetectionResult::from_soft(soft, traces, c),
        final_cavity: last.expect("at least one iteration"),
        cavities,
    })
}

#[derive(Debug, Clone)]
pub struct GepnetConfig {
    pub iterations: usize,
    pub damping: f64,
    pub trace: bool,
    pub params: Arc<GnnParams>,
}

impl GepnetConfig {
    pub fn new(params: Arc<GnnParams>) -> Self {
        Self {
            iterations: 10,
            damping: 0.7,
            trace: false,
            params,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpicnetConfig {
    pub iterations: usize,
    pub initial_variance: f64,
    pub trace: bool,
    pub params: Arc<GnnParams>,
}

impl GpicnetConfig {
    /// Test-time default of 15 iterations; training uses 10.
    pub fn new(params: Arc<GnnParams>) -> Self {
        Self {
            iterations: 15,
            initial_variance: 0.0,
            trace: false,
            params,
        }
    }
}

pub fn gepnet_detect(inst: &SystemInstance, cfg: &GepnetConfig) -> Result<NeuralRun> {
    let mut src = GnnCavity::new(inst, &cfg.params)?;
    gepnet_run(inst, cfg.iterations, cfg.damping, cfg.trace, &mut src)
}

pub fn gpicnet_detect(inst: &SystemInstance, cfg: &GpicnetConfig) -> Result<NeuralRun> {
    let mut src = GnnCavity::new(inst, &cfg.params)?;
    gpicnet_run(inst, cfg.iterations, cfg.initial_variance, cfg.trace, &mut src)
}

#[derive(Debug, Clone)]
pub struct GepnetDetector {
    pub config: GepnetConfig,
}

impl Detector for GepnetDetector {
    fn name(&self) -> &str {
        "gepnet"
    }

    fn detect(&self, inst: &SystemInstance) -> Result<DetectionResult> {
        gepnet_detect(inst, &self.config).map(|r| r.result)
    }
}

#[derive(Debug, Clone)]
pub struct GpicnetDetector {
    pub config: GpicnetConfig,
}

impl Detector for GpicnetDetector {
    fn name(&self) -> &str {
        "gpicnet"
    }

    fn detect(&self, inst: &SystemInstance) -> Result<DetectionResult> {
        gpicnet_detect(inst, &self.config).map(|r| r.result)
    }
}
