//! Subcommand implementations: solve, train, infer, ensemble, convergence.
//!
//! CSV outputs use '.' decimals, comma separators, a header row, and LF
//! endings. All numerical reductions run in a fixed order, so outputs are
//! identical for any thread count and bit-identical across repeated runs
//! with one thread.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::ArrayD;
use rayon::prelude::*;

use specns_core::basis::SpectralField;
use specns_core::nse_solver::{
    Bc, Discretization, FlowState, Lifting, Mesh, Stepper, TimeField, ZeroField,
};
use specns_core::problems::{
    self, gen_beltrami, gen_boundary_2d, gen_forcing_2d, gen_forcing_3d, gen_initial_2d,
    BeltramiFlow, InputFamily, RandomInputSpec, TrajectorySample,
};
use specns_core::trainer::{
    infer as net_infer, net_input_at, resume_training, train_sequential, NetInput, TrainSample,
    TrainSchedule, TrainSetup, TrainedBlock,
};
use specns_core::operator_net::ConvSpec;

use crate::config::RunConfig;
use crate::formats;

/// Command failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CmdError {
    pub code: i32,
    pub message: String,
}

impl CmdError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, message: msg.into() }
    }
    pub fn integrity(msg: impl Into<String>) -> Self {
        Self { code: 3, message: msg.into() }
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Self { code: 4, message: msg.into() }
    }
}

impl From<specns_core::Error> for CmdError {
    fn from(e: specns_core::Error) -> Self {
        match e {
            specns_core::Error::Config(_) => CmdError::config(e.to_string()),
            _ => CmdError::numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::config(format!("i/o error: {e}"))
    }
}

/// Fixed forcing of the 2D initial-condition family.
struct FixedForcing2D;

impl TimeField for FixedForcing2D {
    fn components(&self) -> usize {
        2
    }
    fn eval(&self, _t: f64, mesh: &Mesh) -> Vec<ArrayD<f64>> {
        let x = &mesh.points[0];
        let y = &mesh.points[1];
        let f = ndarray::Zip::from(x).and(y).map_collect(|&a, &b| a.sin() * b.sin()).into_dyn();
        vec![f.clone(), f]
    }
}

/// Generated inputs of one run; owns the sample data the setups borrow.
pub struct Batch {
    pub family: InputFamily,
    forcings: Vec<Box<dyn TimeField>>,
    initials: Vec<Box<dyn TimeField>>,
    liftings: Vec<Option<Lifting>>,
    /// Beltrami parameters when the family has an exact solution.
    pub beltrami: Vec<problems::BeltramiParams>,
    /// Corner |g| per sample (boundary family), surfaced in the manifest.
    pub corner_magnitudes: Vec<f64>,
}

impl Batch {
    pub fn generate(cfg: &RunConfig) -> Batch {
        let spec = RandomInputSpec::new(cfg.family, cfg.sigma, cfg.seed, cfg.count);
        Self::generate_spec(cfg.family, &spec)
    }

    pub fn generate_spec(family: InputFamily, spec: &RandomInputSpec) -> Batch {
        let n = spec.count;
        let mut out = Batch {
            family,
            forcings: Vec::with_capacity(n),
            initials: Vec::with_capacity(n),
            liftings: (0..n).map(|_| None).collect(),
            beltrami: Vec::new(),
            corner_magnitudes: Vec::new(),
        };
        match family {
            InputFamily::Forcing2D => {
                for s in gen_forcing_2d(spec) {
                    out.forcings.push(Box::new(s));
                    out.initials.push(Box::new(ZeroField(2)));
                }
            }
            InputFamily::PerturbedForcing2D => {
                for s in problems::gen_perturbed_forcing(spec) {
                    out.forcings.push(Box::new(s));
                    out.initials.push(Box::new(ZeroField(2)));
                }
            }
            InputFamily::Forcing3D => {
                for s in gen_forcing_3d(spec) {
                    out.forcings.push(Box::new(s));
                    out.initials.push(Box::new(ZeroField(3)));
                }
            }
            InputFamily::Initial2D => {
                for s in gen_initial_2d(spec) {
                    out.forcings.push(Box::new(FixedForcing2D));
                    out.initials.push(Box::new(s));
                }
            }
            InputFamily::Boundary2D => {
                for (i, s) in gen_boundary_2d(spec).into_iter().enumerate() {
                    out.corner_magnitudes.push(s.corner_magnitude);
                    out.liftings[i] = Some(s.lifting());
                    out.forcings.push(Box::new(ZeroField(2)));
                    out.initials.push(Box::new(ZeroField(2)));
                }
            }
            InputFamily::Initial3DBeltrami => {
                for p in gen_beltrami(spec) {
                    out.beltrami.push(p.clone());
                    out.forcings.push(Box::new(ZeroField(3)));
                    out.initials.push(Box::new(BeltramiFlow(p)));
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.forcings.len()
    }

    pub fn forcing(&self, s: usize) -> &dyn TimeField {
        self.forcings[s].as_ref()
    }

    pub fn initial(&self, s: usize) -> &dyn TimeField {
        self.initials[s].as_ref()
    }

    pub fn lifting(&self, s: usize) -> Option<&Lifting> {
        self.liftings[s].as_ref()
    }

    /// Conv input of one sample: broadcast initial data, or per-step
    /// forcing/boundary samples at t^{k+1}.
    pub fn net_input(&self, disc: &Discretization, s: usize) -> NetInput {
        match self.family {
            InputFamily::Initial2D | InputFamily::Initial3DBeltrami => {
                NetInput::Broadcast(net_input_at(disc, self.initial(s), 0.0))
            }
            InputFamily::Boundary2D => {
                let lifting = self.lifting(s).unwrap();
                let nodes = disc.vel_tables[0].nodes().to_vec();
                let steps = disc.cfg.steps;
                let per: Vec<Vec<f64>> = (0..steps)
                    .map(|k| {
                        let t = disc.cfg.dt * (k + 1) as f64;
                        let mut row: Vec<f64> =
                            nodes.iter().map(|&x| (lifting.g)(t, x)).collect();
                        row.extend(std::iter::repeat_n(0.0, nodes.len()));
                        row
                    })
                    .collect();
                NetInput::PerStep(per)
            }
            _ => {
                let steps = disc.cfg.steps;
                let per: Vec<Vec<f64>> = (0..steps)
                    .map(|k| net_input_at(disc, self.forcing(s), disc.cfg.dt * (k + 1) as f64))
                    .collect();
                NetInput::PerStep(per)
            }
        }
    }

    /// Conv geometry implied by the family and grid.
    pub fn conv_specs(&self, cfg: &RunConfig, disc: &Discretization) -> (ConvSpec, ConvSpec) {
        let d = disc.cfg.dim;
        let grid: Vec<usize> = disc.vel_tables.iter().map(|t| t.point_count()).collect();
        let u_conv = match self.family {
            InputFamily::Boundary2D => ConvSpec::new(2, cfg.filters, cfg.kernel, vec![grid[0]]),
            _ => ConvSpec::new(d, cfg.filters, cfg.kernel, grid.clone()),
        };
        let phi_conv = ConvSpec::new(1, cfg.phi_filters, cfg.phi_kernel, grid);
        (u_conv, phi_conv)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CmdError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Per-trajectory error curves vs a reference, averaged over samples.
fn error_csv(reports: &[problems::ErrorReport]) -> String {
    let mut out = String::from("time,mean_rel_l2_x,max_rel_l2_x\n");
    if reports.is_empty() {
        return out;
    }
    let times = &reports[0].times;
    for (i, t) in times.iter().enumerate() {
        let per_sample: Vec<f64> = reports
            .iter()
            .map(|r| r.rel_l2_x.iter().map(|c| c[i]).sum::<f64>() / r.rel_l2_x.len() as f64)
            .collect();
        let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        let max = per_sample.iter().cloned().fold(0.0, f64::max);
        out.push_str(&format!("{t},{mean:.12e},{max:.12e}\n"));
    }
    let mean_tx = reports.iter().map(|r| r.mean_rel_l2_tx()).sum::<f64>() / reports.len() as f64;
    out.push_str(&format!("# mean_rel_l2_tx,{mean_tx:.12e}\n"));
    out
}

/// Runs the classical solver over a batch, collecting recorded states.
fn run_oracle_batch(
    pool: &rayon::ThreadPool,
    disc: &Discretization,
    batch: &Batch,
    stride: usize,
) -> Result<Vec<Vec<FlowState>>, CmdError> {
    pool.install(|| {
        (0..batch.len())
            .into_par_iter()
            .map(|s| {
                let mut stepper = Stepper::new(disc, batch.forcing(s));
                if let Some(l) = batch.lifting(s) {
                    stepper = stepper.with_lifting(l);
                }
                let mut states = Vec::new();
                stepper.run(batch.initial(s), None, |st| {
                    if st.step_index % stride == 0 || st.step_index == disc.cfg.steps {
                        states.push(st.clone());
                    }
                })?;
                Ok(states)
            })
            .collect::<Result<Vec<_>, specns_core::Error>>()
    })
    .map_err(CmdError::from)
}

fn trajectory_samples(states: &[FlowState]) -> Vec<TrajectorySample> {
    states
        .iter()
        .map(|st| TrajectorySample {
            time: st.time,
            velocity: st.u_nodal.clone(),
            pressure_grad: None,
        })
        .collect()
}

/// Reference trajectory per sample: the exact Beltrami solution when the
/// family provides one, otherwise None.
fn beltrami_reference(
    disc: &Discretization,
    params: &problems::BeltramiParams,
    times: &[f64],
) -> Vec<TrajectorySample> {
    let mesh = Mesh::from_tables(&disc.vel_tables);
    times
        .iter()
        .map(|&t| TrajectorySample {
            time: t,
            velocity: params.velocity_mesh(t, &mesh),
            pressure_grad: None,
        })
        .collect()
}

fn dump_trajectory(
    dir: &Path,
    sample: usize,
    states: &[FlowState],
) -> Result<String, CmdError> {
    let mut manifest = String::from("step,time,velocity_file,pressure_file\n");
    for st in states {
        let u_name = format!("s{sample:04}_k{:04}_u.spfd", st.step_index);
        let p_name = format!("s{sample:04}_k{:04}_p.spfd", st.step_index);
        let mut f = fs::File::create(dir.join(&u_name))?;
        formats::write_field(&mut f, &st.u, st.time)?;
        let mut f = fs::File::create(dir.join(&p_name))?;
        formats::write_field(&mut f, &st.p, st.time)?;
        manifest.push_str(&format!("{},{},{u_name},{p_name}\n", st.step_index, st.time));
    }
    Ok(manifest)
}

/// solve: classical trajectories, field dumps, diagnostics, and error CSV
/// when an exact reference exists.
pub fn cmd_solve(cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<(), CmdError> {
    let disc = Discretization::new(cfg.solver.clone())?;
    let batch = Batch::generate(cfg);
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let trajectories = run_oracle_batch(pool, &disc, &batch, cfg.output_stride)?;

    let mut diag = String::from("sample,step,time,weak_div_u,weak_div_u_tilde,energy,enstrophy\n");
    for (s, states) in trajectories.iter().enumerate() {
        let pairs: Vec<(f64, &SpectralField)> =
            states.iter().map(|st| (st.time, &st.u)).collect();
        let ee = problems::energy_enstrophy(&pairs, &disc.vel_tables);
        for (st, (_, energy, enstrophy)) in states.iter().zip(&ee) {
            diag.push_str(&format!(
                "{s},{},{},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                st.step_index,
                st.time,
                st.diagnostics.weak_div_u,
                st.diagnostics.weak_div_u_tilde,
                energy,
                enstrophy
            ));
        }
    }
    write_text(&out.join("diagnostics.csv"), &diag)?;

    if cfg.write_fields {
        let fields_dir = out.join("fields");
        fs::create_dir_all(&fields_dir)?;
        let mut manifest = String::new();
        for (s, states) in trajectories.iter().enumerate() {
            manifest.push_str(&dump_trajectory(&fields_dir, s, states)?);
        }
        write_text(&out.join("manifest.csv"), &manifest)?;
    }

    if batch.family == InputFamily::Initial3DBeltrami {
        let reports: Vec<problems::ErrorReport> = trajectories
            .iter()
            .zip(&batch.beltrami)
            .map(|(states, params)| {
                let times: Vec<f64> = states.iter().map(|st| st.time).collect();
                let pred = trajectory_samples(states);
                let reference = beltrami_reference(&disc, params, &times);
                problems::rel_errors(&pred, &reference, &disc.vel_tables)
            })
            .collect();
        write_text(&out.join("errors.csv"), &error_csv(&reports))?;
    }
    write_text(&out.join("run.cfg"), &cfg.echo())?;
    Ok(())
}

/// Assembles the training/inference setup over a generated batch.
fn build_setup<'a>(
    cfg: &RunConfig,
    disc: &'a Discretization,
    batch: &'a Batch,
) -> TrainSetup<'a> {
    let (u_conv, phi_conv) = batch.conv_specs(cfg, disc);
    let samples = (0..batch.len())
        .map(|s| TrainSample {
            forcing: batch.forcing(s),
            u0: batch.initial(s),
            net_input: batch.net_input(disc, s),
            lifting: batch.lifting(s),
        })
        .collect();
    TrainSetup { disc, samples, u_conv, phi_conv }
}

fn schedule_from(cfg: &RunConfig) -> TrainSchedule {
    TrainSchedule {
        block_size: cfg.block_size,
        total_steps: cfg.solver.steps,
        freeze_conv_after_first: true,
        share_phi_conv: cfg.share_phi_conv,
        u_iterations: cfg.u_iterations,
        phi_iterations: cfg.phi_iterations,
        lbfgs: cfg.lbfgs.clone(),
        seed: cfg.seed,
    }
}

/// Error reports of predictions against classical references on the same
/// inputs.
fn reports_vs_oracle(
    pool: &rayon::ThreadPool,
    disc: &Discretization,
    batch: &Batch,
    predicted: &[Vec<FlowState>],
) -> Result<Vec<problems::ErrorReport>, CmdError> {
    let oracle = run_oracle_batch(pool, disc, batch, 1)?;
    Ok(predicted
        .iter()
        .zip(&oracle)
        .map(|(p, o)| {
            problems::rel_errors(
                &trajectory_samples(p),
                &trajectory_samples(o),
                &disc.vel_tables,
            )
        })
        .collect())
}

/// train: sequential data-free training, checkpoint, log, and (optionally)
/// errors against the classical oracle on the training inputs.
pub fn cmd_train(cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<(), CmdError> {
    let disc = Discretization::new(cfg.solver.clone())?;
    let batch = Batch::generate(cfg);
    let setup = build_setup(cfg, &disc, &batch);
    let schedule = schedule_from(cfg);
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let result = match &cfg.resume {
        Some(path) => {
            let prior = load_checkpoint(path)?;
            pool.install(|| resume_training(&setup, &schedule, prior))?
        }
        None => pool.install(|| train_sequential(&setup, &schedule))?,
    };

    let header = format!("{}algorithm={}\n", cfg.echo(), specns_core::rng::ALGORITHM);
    let mut f = fs::File::create(out.join("model.spon"))?;
    formats::write_checkpoint(&header, &result.blocks, &mut f)?;
    f.flush()?;
    write_text(&out.join("training_log.csv"), &result.log.to_csv(true))?;

    if cfg.compare_oracle {
        let reports = reports_vs_oracle(pool, &disc, &batch, &result.predicted)?;
        write_text(&out.join("train_errors.csv"), &error_csv(&reports))?;
    }
    write_text(&out.join("run.cfg"), &cfg.echo())?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Vec<TrainedBlock>, CmdError> {
    let bytes = fs::read(path)
        .map_err(|e| CmdError::config(format!("cannot read checkpoint {path:?}: {e}")))?;
    let (_, blocks) =
        formats::read_checkpoint(&bytes).map_err(|e| CmdError::integrity(e.to_string()))?;
    Ok(blocks)
}

/// infer: forward-only prediction of a batch with a trained checkpoint.
pub fn cmd_infer(cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<(), CmdError> {
    let ckpt_path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CmdError::config("infer needs infer.checkpoint=<path>"))?;
    let blocks = load_checkpoint(&ckpt_path)?;
    let disc = Discretization::new(cfg.solver.clone())?;
    let batch = Batch::generate(cfg);
    let setup = build_setup(cfg, &disc, &batch);
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let predicted = pool.install(|| net_infer(&setup, &blocks, cfg.block_size))?;

    if cfg.write_fields {
        let fields_dir = out.join("fields");
        fs::create_dir_all(&fields_dir)?;
        let mut manifest = String::new();
        for (s, states) in predicted.iter().enumerate() {
            let kept: Vec<FlowState> = states
                .iter()
                .filter(|st| st.step_index % cfg.output_stride == 0 || st.step_index == disc.cfg.steps)
                .cloned()
                .collect();
            manifest.push_str(&dump_trajectory(&fields_dir, s, &kept)?);
        }
        write_text(&out.join("manifest.csv"), &manifest)?;
    }
    if cfg.compare_oracle {
        let reports = if batch.family == InputFamily::Initial3DBeltrami {
            predicted
                .iter()
                .zip(&batch.beltrami)
                .map(|(states, params)| {
                    let times: Vec<f64> = states.iter().map(|st| st.time).collect();
                    problems::rel_errors(
                        &trajectory_samples(states),
                        &beltrami_reference(&disc, params, &times),
                        &disc.vel_tables,
                    )
                })
                .collect()
        } else {
            reports_vs_oracle(pool, &disc, &batch, &predicted)?
        };
        write_text(&out.join("infer_errors.csv"), &error_csv(&reports))?;
    }
    write_text(&out.join("run.cfg"), &cfg.echo())?;
    Ok(())
}

/// Final-time u-component nodal fields of a batch under either the oracle
/// or a trained model, with the wall time of the whole pass.
fn final_fields(
    pool: &rayon::ThreadPool,
    disc: &Discretization,
    batch: &Batch,
    cfg: &RunConfig,
    blocks: Option<&[TrainedBlock]>,
    count: usize,
) -> Result<(Vec<ArrayD<f64>>, f64), CmdError> {
    let start = Instant::now();
    let fields: Vec<ArrayD<f64>> = match blocks {
        None => pool
            .install(|| {
                (0..count)
                    .into_par_iter()
                    .map(|s| {
                        let mut stepper = Stepper::new(disc, batch.forcing(s));
                        if let Some(l) = batch.lifting(s) {
                            stepper = stepper.with_lifting(l);
                        }
                        let last = stepper.run(batch.initial(s), None, |_| {})?;
                        Ok(last.u_nodal[0].clone())
                    })
                    .collect::<Result<Vec<_>, specns_core::Error>>()
            })
            .map_err(CmdError::from)?,
        Some(blocks) => {
            let sub = Batch {
                family: batch.family,
                forcings: Vec::new(),
                initials: Vec::new(),
                liftings: Vec::new(),
                beltrami: Vec::new(),
                corner_magnitudes: Vec::new(),
            };
            let _ = sub;
            let setup = TrainSetup {
                disc,
                samples: (0..count)
                    .map(|s| TrainSample {
                        forcing: batch.forcing(s),
                        u0: batch.initial(s),
                        net_input: batch.net_input(disc, s),
                        lifting: batch.lifting(s),
                    })
                    .collect(),
                u_conv: blocks[0].params_u.conv_spec.clone(),
                phi_conv: blocks[0].params_phi.conv_spec.clone(),
            };
            let predicted = pool.install(|| net_infer(&setup, blocks, cfg.block_size))?;
            predicted.into_iter().map(|states| states.last().unwrap().u_nodal[0].clone()).collect()
        }
    };
    Ok((fields, start.elapsed().as_secs_f64() * 1e3))
}

/// ensemble: quantity-of-interest statistics, mean-field convergence slope,
/// and the measured timing table.
pub fn cmd_ensemble(cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<(), CmdError> {
    let disc = Discretization::new(cfg.solver.clone())?;
    let mut s_list = cfg.s_list.clone();
    s_list.sort_unstable();
    s_list.dedup();
    let s_max = *s_list.last().ok_or_else(|| CmdError::config("ensemble.s_list is empty"))?;
    let mut gen_cfg = cfg.clone();
    gen_cfg.count = s_max;
    let batch = Batch::generate(&gen_cfg);
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;

    let blocks = if cfg.model == "oracle" {
        None
    } else {
        Some(load_checkpoint(Path::new(&cfg.model))?)
    };

    // Timing per ensemble size: the model pass, plus the oracle pass for
    // the speedup column when a model is given (the ratio is reported,
    // never asserted).
    let mut timing = String::from("s,model_ms,per_sample_ms,oracle_ms,speedup\n");
    let mut full_fields: Option<Vec<ArrayD<f64>>> = None;
    for &s in &s_list {
        let (fields, model_ms) =
            final_fields(pool, &disc, &batch, cfg, blocks.as_deref(), s)?;
        let (oracle_ms, speedup) = if blocks.is_some() {
            let (_, oms) = final_fields(pool, &disc, &batch, cfg, None, s)?;
            (format!("{oms:.3}"), format!("{:.3}", oms / model_ms))
        } else {
            (String::from("-"), String::from("-"))
        };
        timing.push_str(&format!(
            "{s},{model_ms:.3},{:.6},{oracle_ms},{speedup}\n",
            model_ms / s as f64
        ));
        if s == s_max {
            full_fields = Some(fields);
        }
    }
    write_text(&out.join("timing.csv"), &timing)?;

    let fields = full_fields.expect("s_max runs last");
    // Slope prefixes stay well below S_max to keep the finite-sample bias
    // small.
    let slope_s: Vec<usize> =
        [32usize, 16, 8, 4].iter().map(|d| (s_max / d).max(2)).collect();
    let report =
        problems::ensemble_stats(&fields, &disc.vel_tables, &s_list, &slope_s, cfg.bins);

    let mut q_csv = String::from("sample,q\n");
    for (i, q) in report.q_values.iter().enumerate() {
        q_csv.push_str(&format!("{i},{q:.12e}\n"));
    }
    write_text(&out.join("ensemble_q.csv"), &q_csv)?;

    let mut h_csv = String::from("s,bin_lo,bin_hi,count\n");
    for (s, edges, counts) in &report.histograms {
        for (b, c) in counts.iter().enumerate() {
            h_csv.push_str(&format!("{s},{:.12e},{:.12e},{c}\n", edges[b], edges[b + 1]));
        }
    }
    write_text(&out.join("ensemble_hist.csv"), &h_csv)?;

    let mut c_csv = String::from("s,mean_field_error,slope\n");
    let slope_str =
        report.slope.map(|v| format!("{v:.6}")).unwrap_or_else(|| "degenerate".into());
    for (s, e) in &report.convergence {
        c_csv.push_str(&format!("{s},{e:.12e},{slope_str}\n"));
    }
    write_text(&out.join("ensemble_convergence.csv"), &c_csv)?;

    let mut m_csv = String::from("s,skewness,excess_kurtosis\n");
    for ((s, sk), (_, ku)) in report.skewness.iter().zip(&report.kurtosis) {
        m_csv.push_str(&format!("{s},{sk:.12e},{ku:.12e}\n"));
    }
    write_text(&out.join("ensemble_stats.csv"), &m_csv)?;
    write_text(&out.join("run.cfg"), &cfg.echo())?;
    Ok(())
}

/// convergence: temporal order on the exact Beltrami flow and spatial
/// spectral decay on a manufactured Helmholtz solution.
pub fn cmd_convergence(cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<(), CmdError> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    // Temporal sweep: one Beltrami flow, velocity error at T = 0.5.
    let params = problems::BeltramiParams {
        k: 1,
        c4: 65.0,
        c5: -70.0,
        c6: 62.0,
        amplitude: 2e-6,
        nu: 0.1,
        r: 0.0,
    };
    let dts = [0.04, 0.02, 0.01, 0.005];
    let errors: Vec<f64> = pool.install(|| {
        dts.par_iter()
            .map(|&dt| {
                let solver = specns_core::nse_solver::SolverConfig {
                    dim: 3,
                    bc: Bc::Periodic,
                    n_modes: 16,
                    nu: params.nu,
                    dt,
                    steps: (0.5 / dt).round() as usize,
                    dealias: false,
                };
                let disc = Discretization::new(solver)?;
                let forcing = ZeroField(3);
                let stepper = Stepper::new(&disc, &forcing);
                let u0 = BeltramiFlow(params.clone());
                let last = stepper.run(&u0, None, |_| {})?;
                let pred = vec![TrajectorySample {
                    time: last.time,
                    velocity: last.u_nodal.clone(),
                    pressure_grad: None,
                }];
                let reference = beltrami_reference(&disc, &params, &[last.time]);
                let report = problems::rel_errors(&pred, &reference, &disc.vel_tables);
                Ok(report.mean_rel_l2_tx())
            })
            .collect::<Result<Vec<_>, specns_core::Error>>()
    })?;
    let mut t_csv = String::from("dt,rel_l2_x_error,observed_order\n");
    for (i, (&dt, &err)) in dts.iter().zip(&errors).enumerate() {
        let order = if i == 0 {
            String::from("-")
        } else {
            format!("{:.4}", (errors[i - 1] / err).log2() / (dts[i - 1] / dt).log2())
        };
        t_csv.push_str(&format!("{dt},{err:.12e},{order}\n"));
    }
    write_text(&out.join("temporal_convergence.csv"), &t_csv)?;

    // Spatial sweep: manufactured u = sin(pi x) sin(pi y) Helmholtz solve.
    let mut n_csv = String::from("n,max_nodal_error\n");
    for n in [4usize, 8, 12, 16] {
        let spec = specns_core::basis::BasisSpec::legendre_dirichlet(n);
        let tables: Vec<_> = (0..2)
            .map(|_| specns_core::basis::build_tables(spec, n + 2))
            .collect::<Result<_, _>>()?;
        let op = specns_core::galerkin::HelmholtzOperator::build(1.0, 1.0, spec, 2)?;
        let pi = std::f64::consts::PI;
        let tables: Vec<specns_core::basis::BasisTables> = tables;
        let p = tables[0].point_count();
        let f_nodal = ArrayD::from_shape_fn(ndarray::IxDyn(&[p, p]), |i| {
            let (x, y) = (tables[0].nodes()[i[0]], tables[1].nodes()[i[1]]);
            (1.0 + 2.0 * pi * pi) * (pi * x).sin() * (pi * y).sin()
        });
        let proj = specns_core::basis::project_rhs(&f_nodal, &tables);
        let alpha = op.solve_projected(&proj);
        let field = specns_core::galerkin::scalar_field(vec![spec, spec], alpha);
        let nodal = specns_core::basis::synthesize(&field, &tables);
        let mut err = 0.0f64;
        for i in 0..p {
            for j in 0..p {
                let want = (pi * tables[0].nodes()[i]).sin() * (pi * tables[1].nodes()[j]).sin();
                err = err.max((nodal[0][[i, j]] - want).abs());
            }
        }
        n_csv.push_str(&format!("{n},{err:.12e}\n"));
    }
    write_text(&out.join("spatial_convergence.csv"), &n_csv)?;
    write_text(&out.join("run.cfg"), &cfg.echo())?;
    Ok(())
}
