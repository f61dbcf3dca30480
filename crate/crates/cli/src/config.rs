//! Run configuration: presets mirroring the experiment families, overridden
//! by a flat key=value config file with section dots, then by CLI flags.
//! Unknown keys are errors.

use std::path::PathBuf;

use specns_core::nse_solver::{Bc, SolverConfig};
use specns_core::problems::InputFamily;
use specns_core::trainer::LbfgsOptions;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preset: String,
    pub family: InputFamily,
    pub solver: SolverConfig,
    /// Coefficient standard deviation of the generated inputs.
    pub sigma: f64,
    /// Number of samples to generate.
    pub count: usize,
    /// Training block size K.
    pub block_size: usize,
    pub u_iterations: usize,
    pub phi_iterations: usize,
    pub share_phi_conv: bool,
    /// Compare against classical-solver references where applicable.
    pub compare_oracle: bool,
    pub lbfgs: LbfgsOptions,
    pub filters: usize,
    pub kernel: usize,
    pub phi_filters: usize,
    pub phi_kernel: usize,
    /// Ensemble sample sizes (sorted on output).
    pub s_list: Vec<usize>,
    pub bins: usize,
    /// Inference/ensemble model: checkpoint path, or "oracle".
    pub model: String,
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to resume training from.
    pub resume: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: usize,
    /// Record every n-th step in field dumps.
    pub output_stride: usize,
    pub write_fields: bool,
}

pub const PRESETS: &[&str] =
    &["2d-forcing", "2d-initial", "2d-initial-desk", "2d-boundary", "3d-beltrami", "3d-forcing"];

impl RunConfig {
    /// Baseline configuration of a named preset.
    pub fn preset(name: &str) -> Result<Self, String> {
        let mut cfg = Self {
            preset: name.to_string(),
            family: InputFamily::Forcing2D,
            solver: SolverConfig {
                dim: 2,
                bc: Bc::Dirichlet,
                n_modes: 22,
                nu: 0.1,
                dt: 0.01,
                steps: 100,
                dealias: false,
            },
            sigma: 5.0,
            count: 8,
            block_size: 10,
            u_iterations: 500,
            phi_iterations: 500,
            share_phi_conv: false,
            compare_oracle: true,
            lbfgs: LbfgsOptions::default(),
            filters: 10,
            kernel: 9,
            phi_filters: 10,
            phi_kernel: 9,
            s_list: vec![100, 500, 1000],
            bins: 15,
            model: "oracle".into(),
            checkpoint: None,
            resume: None,
            out_dir: PathBuf::from("out"),
            seed: 42,
            threads: 1,
            output_stride: 10,
            write_fields: true,
        };
        match name {
            "2d-forcing" => {}
            "2d-initial" => {
                cfg.family = InputFamily::Initial2D;
                cfg.solver.bc = Bc::Periodic;
                cfg.solver.n_modes = 32;
                cfg.solver.nu = 0.01;
                cfg.filters = 3;
                cfg.kernel = 9;
                cfg.phi_filters = 3;
                cfg.phi_kernel = 9;
            }
            // Desk-scale variant of 2d-initial (same family, smaller grid).
            "2d-initial-desk" => {
                cfg.family = InputFamily::Initial2D;
                cfg.solver.bc = Bc::Periodic;
                cfg.solver.n_modes = 16;
                cfg.solver.nu = 0.01;
                cfg.filters = 3;
                cfg.kernel = 9;
                cfg.phi_filters = 3;
                cfg.phi_kernel = 9;
                cfg.u_iterations = 250;
                cfg.phi_iterations = 120;
            }
            "2d-boundary" => {
                cfg.family = InputFamily::Boundary2D;
                cfg.solver.n_modes = 62;
                cfg.solver.nu = 0.5;
                cfg.filters = 30;
                cfg.kernel = 15;
                cfg.phi_filters = 3;
                cfg.phi_kernel = 15;
            }
            "3d-beltrami" => {
                cfg.family = InputFamily::Initial3DBeltrami;
                cfg.solver.dim = 3;
                cfg.solver.bc = Bc::Periodic;
                cfg.solver.n_modes = 24;
                cfg.solver.nu = 0.1;
                cfg.sigma = 10.0;
                cfg.filters = 2;
                cfg.kernel = 19;
                cfg.phi_filters = 2;
                cfg.phi_kernel = 19;
            }
            "3d-forcing" => {
                cfg.family = InputFamily::Forcing3D;
                cfg.solver.dim = 3;
                cfg.solver.n_modes = 18;
                cfg.solver.nu = 1.0;
                cfg.filters = 3;
                cfg.kernel = 9;
                cfg.phi_filters = 3;
                cfg.phi_kernel = 9;
            }
            other => return Err(format!("unknown preset '{other}' (expected one of {PRESETS:?})")),
        }
        Ok(cfg)
    }

    /// Applies one key=value assignment; unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| format!("bad value for {key}: {e}"))
        }
        match key {
            "preset" => {
                let keep = self.overrides_snapshot();
                *self = Self::preset(value)?;
                self.restore_overrides(keep);
            }
            "solver.n" => self.solver.n_modes = parse(key, value)?,
            "solver.nu" => self.solver.nu = parse(key, value)?,
            "solver.dt" => self.solver.dt = parse(key, value)?,
            "solver.steps" => self.solver.steps = parse(key, value)?,
            "solver.dealias" => self.solver.dealias = parse(key, value)?,
            "input.sigma" => self.sigma = parse(key, value)?,
            "input.count" => self.count = parse(key, value)?,
            "train.block" => self.block_size = parse(key, value)?,
            "train.u_iters" => self.u_iterations = parse(key, value)?,
            "train.phi_iters" => self.phi_iterations = parse(key, value)?,
            "train.share_phi_conv" => self.share_phi_conv = parse(key, value)?,
            "train.compare_oracle" => self.compare_oracle = parse(key, value)?,
            "train.lbfgs.m" => self.lbfgs.history_size = parse(key, value)?,
            "train.lbfgs.max_iter" => {
                let v: usize = parse(key, value)?;
                self.u_iterations = v;
                self.phi_iterations = v;
            }
            "train.lbfgs.grad_tol" => self.lbfgs.gradient_tolerance = parse(key, value)?,
            "train.lbfgs.plateau_tol" => self.lbfgs.plateau_tolerance = parse(key, value)?,
            "train.lbfgs.plateau_window" => self.lbfgs.plateau_window = parse(key, value)?,
            "train.lbfgs.c1" => self.lbfgs.c1 = parse(key, value)?,
            "train.lbfgs.c2" => self.lbfgs.c2 = parse(key, value)?,
            "train.lbfgs.max_ls" => self.lbfgs.max_line_search = parse(key, value)?,
            "net.filters" => self.filters = parse(key, value)?,
            "net.kernel" => self.kernel = parse(key, value)?,
            "net.phi_filters" => self.phi_filters = parse(key, value)?,
            "net.phi_kernel" => self.phi_kernel = parse(key, value)?,
            "ensemble.s_list" => {
                self.s_list = value
                    .split(',')
                    .map(|v| v.trim().parse().map_err(|e| format!("bad value for {key}: {e}")))
                    .collect::<Result<_, _>>()?;
            }
            "ensemble.bins" => self.bins = parse(key, value)?,
            "ensemble.model" => self.model = value.to_string(),
            "infer.checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "train.resume" => self.resume = Some(PathBuf::from(value)),
            "output.stride" => self.output_stride = parse(key, value)?,
            "output.fields" => self.write_fields = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    fn overrides_snapshot(&self) -> (PathBuf, u64, usize) {
        (self.out_dir.clone(), self.seed, self.threads)
    }

    fn restore_overrides(&mut self, (out, seed, threads): (PathBuf, u64, usize)) {
        self.out_dir = out;
        self.seed = seed;
        self.threads = threads;
    }

    /// Parses a flat key=value file (comments start with '#').
    pub fn apply_file(&mut self, text: &str) -> Result<(), String> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!("line {}: expected key=value, got '{line}'", i + 1));
            };
            self.apply(key.trim(), value.trim())
                .map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    /// Full validation before any compute.
    pub fn validate(&self) -> Result<(), String> {
        self.solver.validate().map_err(|e| e.to_string())?;
        if self.sigma <= 0.0 {
            return Err("input.sigma must be positive".into());
        }
        if self.count == 0 {
            return Err("input.count must be positive".into());
        }
        if self.block_size == 0 {
            return Err("train.block must be positive".into());
        }
        if self.threads == 0 {
            return Err("threads must be positive".into());
        }
        if self.output_stride == 0 {
            return Err("output.stride must be positive".into());
        }
        let family_dim = match self.family {
            InputFamily::Forcing3D | InputFamily::Initial3DBeltrami => 3,
            _ => 2,
        };
        if family_dim != self.solver.dim {
            return Err(format!(
                "input family needs dim {family_dim}, solver has dim {}",
                self.solver.dim
            ));
        }
        let grid = match self.solver.bc {
            Bc::Dirichlet => self.solver.n_modes + 2,
            Bc::Periodic => self.solver.n_modes,
        };
        if self.kernel > grid || self.phi_kernel > grid {
            return Err(format!(
                "conv kernel exceeds the {grid}-point grid (kernel {}, phi {})",
                self.kernel, self.phi_kernel
            ));
        }
        Ok(())
    }

    /// Echo of the configuration written into checkpoint headers and run
    /// manifests.
    pub fn echo(&self) -> String {
        let bc = match self.solver.bc {
            Bc::Dirichlet => "dirichlet",
            Bc::Periodic => "periodic",
        };
        format!(
            "preset={}\nprng={}\nseed={}\nsolver.dim={}\nsolver.bc={}\nsolver.n={}\nsolver.nu={}\nsolver.dt={}\nsolver.steps={}\nsolver.dealias={}\ninput.sigma={}\ninput.count={}\ntrain.block={}\ntrain.u_iters={}\ntrain.phi_iters={}\ntrain.share_phi_conv={}\nnet.filters={}\nnet.kernel={}\nnet.phi_filters={}\nnet.phi_kernel={}\n",
            self.preset,
            specns_core::rng::ALGORITHM,
            self.seed,
            self.solver.dim,
            bc,
            self.solver.n_modes,
            self.solver.nu,
            self.solver.dt,
            self.solver.steps,
            self.solver.dealias,
            self.sigma,
            self.count,
            self.block_size,
            self.u_iterations,
            self.phi_iterations,
            self.share_phi_conv,
            self.filters,
            self.kernel,
            self.phi_filters,
            self.phi_kernel,
        )
    }
}
