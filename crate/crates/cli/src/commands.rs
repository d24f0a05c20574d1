//! The four pipeline commands. Every output file is written under a
//! `.partial` name and renamed into place once complete, so interrupted runs
//! never leave truncated artifacts behind.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use eigenpde::estimators::{ecov, emean, erq, evar, DiffusionAtStates, EstimatorError};
use eigenpde::fvm::{
    assemble, read_eigenfunction_tables, smallest_eigenpairs, write_eigenfunction_tables,
    write_eigenvalue_report, EigenfunctionTable, FvmGrid,
};
use eigenpde::network::{forward_batch, read_checkpoint, write_checkpoint, NetworkParams, Tanh};
use eigenpde::potentials::PotentialSpec;
use eigenpde::sampling::{
    euler_maruyama_thinned, read_dataset, reweight, write_dataset, write_dataset_csv,
    WeightedDataset,
};
use eigenpde::training::{
    train_observed, EigenEstimate, StepRecord, TrainLogWriter, TrainObserver,
};

use crate::config::ExperimentConfig;

/// Write a file atomically: the payload goes to `<name>.partial` and is
/// renamed to `name` only after the writer succeeds.
pub fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = partial_name(path);
    {
        let file =
            File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        let mut w = BufWriter::new(file);
        write(&mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)
        .with_context(|| format!("moving {} into place", tmp.display()))?;
    Ok(())
}

fn partial_name(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Every command records the exact configuration it ran with.
pub fn write_resolved_config(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let text = config.to_toml()?;
    write_atomic(&out_dir.join("resolved_config.toml"), |w| {
        w.write_all(text.as_bytes())?;
        Ok(())
    })
}

/// `sample`: run the Euler-Maruyama chain, attach importance weights if a
/// bias is configured, and write the dataset plus a planar histogram.
pub fn cmd_sample(config: &ExperimentConfig) -> Result<()> {
    let section = config
        .sampling
        .as_ref()
        .context("config has no [sampling] section")?;
    let out_dir = config.output.dir.clone();
    std::fs::create_dir_all(&out_dir)?;

    let target = config.potential_spec()?;
    let (chain_spec, log_ratio_bias) = match &config.reweighting {
        None => (target.clone(), None),
        Some(rw) => {
            if rw.kind != "temperature" {
                bail!("unknown reweighting kind '{}' (only 'temperature' is built in)", rw.kind);
            }
            let chain = PotentialSpec::builtin(
                &config.potential.id,
                config.potential.dim,
                rw.sampling_beta,
            )?;
            (chain, Some(rw.sampling_beta))
        }
    };

    let mut data = euler_maruyama_thinned(
        &chain_spec,
        &section.x0,
        section.dt,
        section.n,
        section.seed,
        section.burn_in,
        section.thin,
    )?;
    data.meta.potential_id = config.potential.id.clone();

    if let Some(sampling_beta) = log_ratio_bias {
        let beta = target.beta();
        // log d(mu_beta)/d(mu_sampling_beta) = -(beta - sampling_beta) V.
        let (reweighted, report) =
            reweight(&data, |x| -(beta - sampling_beta) * target.value(x).unwrap_or(f64::NAN))?;
        if report.clamped > 0 {
            eprintln!("warning: {} weights underflowed and were clamped", report.clamped);
        }
        data = reweighted;
        data.meta.beta = beta;
        data.meta.bias = Some(format!("temperature: sampled at beta = {sampling_beta}"));
        data.meta.potential_id = config.potential.id.clone();
    }

    write_atomic(&out_dir.join("dataset.eigdata"), |w| {
        write_dataset(w, &data)?;
        Ok(())
    })?;
    if section.csv_export {
        write_atomic(&out_dir.join("dataset.csv"), |w| {
            write_dataset_csv(w, &data)?;
            Ok(())
        })?;
    }
    write_histogram(&out_dir.join("histogram.csv"), &data, section)?;
    write_resolved_config(config, &out_dir)?;
    println!(
        "sample: wrote {} states of dimension {} to {}",
        data.len(),
        data.dim(),
        out_dir.join("dataset.eigdata").display()
    );
    Ok(())
}

/// Weighted 2-D marginal histogram of the first two coordinates.
fn write_histogram(
    path: &Path,
    data: &WeightedDataset,
    section: &crate::config::SamplingSection,
) -> Result<()> {
    let bins = section.histogram.bins.max(1);
    let range = match section.histogram.range {
        Some(r) => r,
        None => {
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            for i in 0..data.len() {
                let s = data.state(i);
                for c in 0..2 {
                    lo[c] = lo[c].min(s[c]);
                    hi[c] = hi[c].max(s[c]);
                }
            }
            [[lo[0], hi[0]], [lo[1], hi[1]]]
        }
    };
    let width = [
        (range[0][1] - range[0][0]).max(f64::MIN_POSITIVE),
        (range[1][1] - range[1][0]).max(f64::MIN_POSITIVE),
    ];
    let mut counts = vec![0.0f64; bins * bins];
    let mut total = 0.0;
    for i in 0..data.len() {
        let s = data.state(i);
        let w = data.weight(i);
        total += w;
        let bx = (((s[0] - range[0][0]) / width[0]) * bins as f64).floor();
        let by = (((s[1] - range[1][0]) / width[1]) * bins as f64).floor();
        if bx < 0.0 || by < 0.0 || bx >= bins as f64 || by >= bins as f64 {
            continue;
        }
        counts[by as usize * bins + bx as usize] += w;
    }
    let cell_area = (width[0] / bins as f64) * (width[1] / bins as f64);
    write_atomic(path, |w| {
        writeln!(w, "x,y,weight,density")?;
        for by in 0..bins {
            for bx in 0..bins {
                let x = range[0][0] + (bx as f64 + 0.5) * width[0] / bins as f64;
                let y = range[1][0] + (by as f64 + 0.5) * width[1] / bins as f64;
                let c = counts[by * bins + bx];
                writeln!(w, "{x},{y},{c},{}", c / (total * cell_area))?;
            }
        }
        Ok(())
    })
}

/// `fvm`: assemble the reference operator and export the non-trivial
/// eigenvalues and eigenfunction tables.
pub fn cmd_fvm(config: &ExperimentConfig) -> Result<()> {
    let section = config.fvm.as_ref().context("config has no [fvm] section")?;
    let out_dir = config.output.dir.clone();
    std::fs::create_dir_all(&out_dir)?;

    let potential = config.potential_spec()?;
    let grid = FvmGrid::new(
        (section.domain[0][0], section.domain[0][1]),
        (section.domain[1][0], section.domain[1][1]),
        section.nx,
        section.ny,
        &potential,
    )?;
    let op = assemble(&potential, &grid)?;
    // One extra pair: the trivial near-zero mode is discarded below.
    let solution = smallest_eigenpairs(&op, section.k + 1, section.tol)?;
    if solution.eigenvalues[0].abs() > 1e-6 {
        bail!(
            "expected a near-zero trivial mode, got lambda_0 = {}",
            solution.eigenvalues[0]
        );
    }

    write_atomic(&out_dir.join("eigenvalues.csv"), |w| {
        write_eigenvalue_report(w, 1, &solution.eigenvalues[1..], &solution.residuals[1..])?;
        Ok(())
    })?;

    let tables: Vec<EigenfunctionTable> = (1..=section.k)
        .map(|i| EigenfunctionTable::from_values(&grid, solution.eigenfunction(&grid, i)))
        .collect();
    let refs: Vec<&EigenfunctionTable> = tables.iter().collect();
    write_atomic(&out_dir.join("eigenfunctions.csv"), |w| {
        write_eigenfunction_tables(w, &refs)?;
        Ok(())
    })?;
    write_resolved_config(config, &out_dir)?;

    for (i, l) in solution.eigenvalues[1..].iter().enumerate() {
        println!("fvm: lambda_{} = {l}", i + 1);
    }
    Ok(())
}

struct CheckpointObserver<'a> {
    out_dir: &'a Path,
    interval: usize,
}

impl TrainObserver for CheckpointObserver<'_> {
    fn on_step(&mut self, step: usize, _record: &StepRecord<'_>, networks: &[NetworkParams]) {
        if self.interval == 0 || (step + 1) % self.interval != 0 {
            return;
        }
        for (i, net) in networks.iter().enumerate() {
            let path = self.out_dir.join(format!("net_{}_step_{}.eignet", i + 1, step + 1));
            let _ = write_atomic(&path, |w| {
                write_checkpoint(w, net)?;
                Ok(())
            });
        }
    }
}

struct FanoutObserver<'a> {
    observers: Vec<&'a mut dyn TrainObserver>,
}

impl TrainObserver for FanoutObserver<'_> {
    fn on_step(&mut self, step: usize, record: &StepRecord<'_>, networks: &[NetworkParams]) {
        for obs in &mut self.observers {
            obs.on_step(step, record, networks);
        }
    }
}

/// `train`: run the training loop on a sampled dataset, streaming the CSV
/// log and checkpoints, then write the final report.
pub fn cmd_train(config: &ExperimentConfig) -> Result<()> {
    let section = config.training.as_ref().context("config has no [training] section")?;
    let out_dir = config.output.dir.clone();
    std::fs::create_dir_all(&out_dir)?;

    let potential = config.potential_spec()?;
    let dataset_path = section
        .dataset
        .clone()
        .unwrap_or_else(|| out_dir.join("dataset.eigdata"));
    let file = File::open(&dataset_path)
        .with_context(|| format!("opening dataset {}", dataset_path.display()))?;
    let dataset = read_dataset(file)?;
    if (dataset.meta.beta - potential.beta()).abs() > 1e-12 {
        bail!(
            "dataset was generated for beta = {} but the potential section has beta = {}",
            dataset.meta.beta,
            potential.beta()
        );
    }

    let train_config = section.train_config();
    let arch = section.architecture(potential.dim())?;

    // The log is streamed (flushed every 10 steps) to the partial name and
    // renamed on success like every other artifact.
    let log_path = out_dir.join("training_log.csv");
    let log_partial = partial_name(&log_path);
    let log_file = File::create(&log_partial)?;
    let mut log = TrainLogWriter::new(BufWriter::new(log_file));
    let mut checkpoints = CheckpointObserver { out_dir: &out_dir, interval: section.checkpoint_interval };
    let estimate = {
        let mut fanout = FanoutObserver { observers: vec![&mut log, &mut checkpoints] };
        train_observed(&train_config, &arch, &dataset, &potential, &mut fanout)?
    };
    log.finish()?;
    std::fs::rename(&log_partial, &log_path)?;

    for (i, net) in estimate.networks.iter().enumerate() {
        write_atomic(&out_dir.join(format!("net_{}.eignet", i + 1)), |w| {
            write_checkpoint(w, net)?;
            Ok(())
        })?;
    }
    write_final_report(&out_dir.join("final_report.csv"), &estimate)?;
    write_resolved_config(config, &out_dir)?;

    for i in 0..train_config.k {
        println!(
            "train: lambda_{} = {} +- {}",
            i + 1,
            estimate.lambda_mean[i],
            estimate.lambda_std[i]
        );
    }
    Ok(())
}

fn write_final_report(path: &Path, estimate: &EigenEstimate) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "index,lambda_mean,lambda_std,mean_shift")?;
        for i in 0..estimate.lambda_mean.len() {
            writeln!(
                w,
                "{},{},{},{}",
                i + 1,
                estimate.lambda_mean[i],
                estimate.lambda_std[i],
                estimate.mean_shifts[i]
            )?;
        }
        Ok(())
    })
}

/// `eval`: score checkpoints on a dataset (ERQ / orthonormality report),
/// export them on a grid, and compare against reference tables.
pub fn cmd_eval(config: &ExperimentConfig) -> Result<()> {
    let section = config.eval.as_ref().context("config has no [eval] section")?;
    let out_dir = config.output.dir.clone();
    std::fs::create_dir_all(&out_dir)?;

    let potential = config.potential_spec()?;
    let mut networks = Vec::new();
    for path in &section.checkpoints {
        let file = File::open(path)
            .with_context(|| format!("opening checkpoint {}", path.display()))?;
        networks.push(read_checkpoint(file)?);
    }
    if networks.is_empty() {
        bail!("eval.checkpoints is empty");
    }
    for net in &networks {
        if net.arch().input_dim() != potential.dim() {
            bail!(
                "checkpoint expects dimension {}, potential has {}",
                net.arch().input_dim(),
                potential.dim()
            );
        }
    }

    // Mean shifts come from the dataset when present, else from the grid's
    // stationary weights.
    let mut mean_shifts = vec![0.0; networks.len()];

    if let Some(dataset_path) = &section.dataset {
        let file = File::open(dataset_path)
            .with_context(|| format!("opening dataset {}", dataset_path.display()))?;
        let dataset = read_dataset(file)?;
        if dataset.dim() != potential.dim() {
            bail!("dataset dimension {} != potential dimension {}", dataset.dim(), potential.dim());
        }
        let report = dataset_report(&networks, &dataset, &potential, &mut mean_shifts)?;
        write_atomic(&out_dir.join("eval_report.csv"), |w| {
            w.write_all(report.as_bytes())?;
            Ok(())
        })?;
    }

    let grid_spec = section.grid.as_ref();
    let mut grid_values: Option<(FvmGrid, Vec<Vec<f64>>)> = None;
    if let Some(g) = grid_spec {
        if potential.dim() != 2 {
            bail!("grid export requires a planar potential");
        }
        let grid = FvmGrid::new(
            (g.domain[0][0], g.domain[0][1]),
            (g.domain[1][0], g.domain[1][1]),
            g.nx,
            g.ny,
            &potential,
        )?;
        let values = networks_on_grid(&networks, &grid)?;
        if section.dataset.is_none() {
            let prob = grid.prob_weights();
            for (i, vals) in values.iter().enumerate() {
                mean_shifts[i] = vals.iter().zip(&prob).map(|(v, p)| v * p).sum();
            }
        }
        let centered: Vec<Vec<f64>> = values
            .iter()
            .zip(&mean_shifts)
            .map(|(vals, m)| vals.iter().map(|v| v - m).collect())
            .collect();
        write_grid_export(&out_dir.join("eigenfunctions_on_grid.csv"), &grid, &centered)?;
        grid_values = Some((grid, centered));
    }

    if let Some(reference_path) = &section.reference {
        let (grid, centered) = match &grid_values {
            Some(pair) => pair,
            None => bail!("eval.reference requires eval.grid"),
        };
        let file = File::open(reference_path)
            .with_context(|| format!("opening reference {}", reference_path.display()))?;
        let tables = read_eigenfunction_tables(file)?;
        let report = reference_differences(grid, centered, &tables)?;
        write_atomic(&out_dir.join("reference_differences.csv"), |w| {
            w.write_all(report.as_bytes())?;
            Ok(())
        })?;
    }

    write_resolved_config(config, &out_dir)?;
    println!("eval: wrote reports to {}", out_dir.display());
    Ok(())
}

fn networks_on_grid(networks: &[NetworkParams], grid: &FvmGrid) -> Result<Vec<Vec<f64>>> {
    let n = grid.n_cells();
    let mut states = Vec::with_capacity(n * 2);
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let (x, y) = grid.cell_center(ix, iy);
            states.push(x);
            states.push(y);
        }
    }
    networks
        .iter()
        .map(|net| {
            let mut values = vec![0.0; n];
            let mut grads = vec![0.0; n * 2];
            forward_batch(net, &Tanh, &states, 2, &mut values, &mut grads, None)?;
            Ok(values)
        })
        .collect()
}

fn write_grid_export(path: &Path, grid: &FvmGrid, centered: &[Vec<f64>]) -> Result<()> {
    write_atomic(path, |w| {
        let mut header = String::from("x,y");
        for i in 1..=centered.len() {
            header.push_str(&format!(",phi_{i}"));
        }
        writeln!(w, "{header}")?;
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let (x, y) = grid.cell_center(ix, iy);
                write!(w, "{x},{y}")?;
                for vals in centered {
                    write!(w, ",{}", vals[grid.index(ix, iy)])?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    })
}

/// ERQ, mean, variance and the pairwise covariance residuals of the
/// checkpoints over a dataset. Degenerate (near-constant) networks are
/// flagged instead of aborting.
fn dataset_report(
    networks: &[NetworkParams],
    dataset: &WeightedDataset,
    potential: &PotentialSpec,
    mean_shifts: &mut [f64],
) -> Result<String> {
    let n = dataset.len();
    let d = dataset.dim();
    let k = networks.len();
    let mut all_values = vec![0.0; k * n];
    let mut grads = vec![0.0; n * d];
    let mut out = String::from("network,lambda,mean,variance,flag\n");
    for (i, net) in networks.iter().enumerate() {
        let values = &mut all_values[i * n..(i + 1) * n];
        forward_batch(net, &Tanh, dataset.states(), d, values, &mut grads, None)?;
        let mean = emean(values, dataset.weights())?;
        mean_shifts[i] = mean;
        let var = evar(values, dataset.weights())?;
        match erq(values, &grads, d, DiffusionAtStates::Identity, potential.beta(), dataset.weights())
        {
            Ok(lambda) => {
                out.push_str(&format!("{},{lambda},{mean},{var},ok\n", i + 1));
            }
            Err(EstimatorError::DegenerateVariance { variance, .. }) => {
                out.push_str(&format!("{},,{mean},{variance},zero_variance\n", i + 1));
            }
            Err(e) => return Err(e.into()),
        }
    }
    out.push_str("i,j,ecov,target,abs_error\n");
    for i in 0..k {
        for j in i..k {
            let c = ecov(
                &all_values[i * n..(i + 1) * n],
                &all_values[j * n..(j + 1) * n],
                dataset.weights(),
            )?;
            let target = if i == j { 1.0 } else { 0.0 };
            out.push_str(&format!(
                "{},{},{c},{target},{}\n",
                i + 1,
                j + 1,
                (c - target).abs()
            ));
        }
    }
    Ok(out)
}

/// Sign-aligned L2(mu) differences between the centered checkpoints and the
/// reference eigenfunctions, both normalized on the reference grid.
fn reference_differences(
    grid: &FvmGrid,
    centered: &[Vec<f64>],
    tables: &[EigenfunctionTable],
) -> Result<String> {
    if tables.is_empty() {
        bail!("reference file contains no tables");
    }
    if tables[0].nx != grid.nx || tables[0].ny != grid.ny {
        bail!(
            "reference grid {}x{} does not match eval grid {}x{}",
            tables[0].nx,
            tables[0].ny,
            grid.nx,
            grid.ny
        );
    }
    let mut out = String::from("index,l2_mu_difference\n");
    for (i, vals) in centered.iter().enumerate() {
        let Some(table) = tables.get(i) else { break };
        // Normalize the network eigenfunction in L2(mu) on this grid.
        let norm = grid.mu_inner(vals, vals).sqrt();
        if norm <= 0.0 {
            out.push_str(&format!("{},\n", i + 1));
            continue;
        }
        let normalized: Vec<f64> = vals.iter().map(|v| v / norm).collect();
        // Signs are aligned by maximizing the mu-weighted inner product.
        let inner = grid.mu_inner(&normalized, table.values());
        let sign = if inner >= 0.0 { 1.0 } else { -1.0 };
        let diff: Vec<f64> = normalized
            .iter()
            .zip(table.values())
            .map(|(a, b)| a - sign * b)
            .collect();
        let l2 = grid.mu_inner(&diff, &diff).sqrt();
        out.push_str(&format!("{},{l2}\n", i + 1));
    }
    Ok(out)
}
