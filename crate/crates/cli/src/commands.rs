use std::path::{Path, PathBuf};

use dupire_core::mc::{mc_implied_vol, simulate_paths_with, SortedSlice};
use dupire_core::{
    calibrate_local_vol, calibrate_slv_leverage, deterministic_local_vol, validate_model, CalibrationConfig,
    DiscountCurve, Error, LeverageSurface, MarketSnapshot, ModelSpec, SimulationConfig, SimulationGrid, SurfaceKind,
    TotalVarianceSurface,
};

use crate::config::{resolve, RunConfig};
use crate::error::CliError;
use crate::manifest::{sha256_file, FileRecord};
use crate::verify::{run_checks, write_checks};

/// State shared by all commands: the parsed config, where its relative
/// paths point, and the files read and written so far.
#[derive(Debug)]
pub struct Context {
    pub config: RunConfig,
    pub config_dir: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub paths: Option<usize>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<String>,
}

impl Context {
    /// Resolves and fingerprints an input file.
    pub fn input(&mut self, name: &str, given: &Path) -> Result<PathBuf, CliError> {
        let path = resolve(&self.config_dir, given);
        let sha256 = sha256_file(&path)?;
        self.inputs.push(FileRecord { name: name.to_string(), path: given.display().to_string(), sha256 });
        Ok(path)
    }

    /// Registers an output file and returns where to write it.
    pub fn output(&mut self, file: &str) -> PathBuf {
        self.outputs.push(file.to_string());
        self.out.join(file)
    }

    fn calibration(&self) -> Result<CalibrationConfig, CliError> {
        let mut cfg = self.config.calibration.clone().ok_or_else(|| CliError::Config {
            path: "config".into(),
            field: "calibration".into(),
            msg: "this command needs a [calibration] section".into(),
        })?;
        cfg.seed = self.seed;
        if let Some(n) = self.paths {
            cfg.n_paths = n;
        }
        Ok(cfg)
    }
}

pub fn load_market(ctx: &mut Context) -> Result<MarketSnapshot, CliError> {
    let m = ctx.config.market.clone();
    let domestic = DiscountCurve::from_csv(ctx.input("domestic_curve", &m.domestic)?)?;
    let foreign = DiscountCurve::from_csv(ctx.input("foreign_curve", &m.foreign)?)?;
    let surface = match (&m.quotes, &m.surface) {
        (Some(q), None) => {
            let path = ctx.input("quotes", q)?;
            let fwd = |t: f64| dupire_core::curves::forward_price(m.spot, &domestic, &foreign, t);
            TotalVarianceSurface::from_csv(path, fwd, m.y_nodes)?
        }
        (None, Some(s)) => TotalVarianceSurface::from_grid_csv(ctx.input("surface", s)?)?,
        _ => {
            return Err(CliError::Config {
                path: "config".into(),
                field: "market".into(),
                msg: "give exactly one of `quotes` and `surface`".into(),
            })
        }
    };
    Ok(MarketSnapshot::new(m.spot, domestic, foreign, surface)?)
}

pub fn load_model(ctx: &mut Context) -> Result<ModelSpec, CliError> {
    let given = ctx.config.model.clone();
    let spec = ModelSpec::from_file(ctx.input("model", &given)?)?;
    if spec.spot != ctx.config.market.spot {
        return Err(CliError::Config {
            path: given.display().to_string(),
            field: "spot".into(),
            msg: format!("model spot {} differs from market spot {}", spec.spot, ctx.config.market.spot),
        });
    }
    Ok(spec)
}

pub fn build_surface(ctx: &mut Context) -> Result<(), CliError> {
    let snap = load_market(ctx)?;
    snap.surface.write_csv(ctx.output("surface.csv"))?;
    if let Some(cfg) = ctx.config.calibration.clone() {
        let lv = deterministic_local_vol(&snap, &cfg.strikes, &cfg.maturities)?;
        lv.write_csv(ctx.output("dupire_local_vol.csv"))?;
    }
    Ok(())
}

fn write_report(ctx: &mut Context, report: &dupire_core::CalibrationReport, stem: &str) -> Result<(), CliError> {
    report.write(&ctx.out, stem)?;
    for suffix in [".csv", "_nodes.csv", "_report.toml"] {
        ctx.outputs.push(format!("{stem}{suffix}"));
    }
    Ok(())
}

pub fn calibrate_lv(ctx: &mut Context) -> Result<(), CliError> {
    let snap = load_market(ctx)?;
    let spec = load_model(ctx)?;
    let cfg = ctx.calibration()?;
    // the model file may describe the stochastic-vol model; only its rate
    // part enters here
    let spec = ModelSpec { variance: None, ..spec };
    let report = calibrate_local_vol(&snap, &spec, &cfg)?;
    write_report(ctx, &report, "local_vol")
}

pub fn calibrate_slv(ctx: &mut Context) -> Result<(), CliError> {
    let snap = load_market(ctx)?;
    let spec = load_model(ctx)?;
    let cfg = ctx.calibration()?;
    let lv = match ctx.config.slv.local_vol.clone() {
        Some(p) => LeverageSurface::from_csv(ctx.input("local_vol", &p)?, SurfaceKind::LocalVol)?,
        None if spec.has_stochastic_rates() => {
            let lv_spec = ModelSpec { variance: None, ..spec.clone() };
            let report = calibrate_local_vol(&snap, &lv_spec, &cfg)?;
            write_report(ctx, &report, "local_vol")?;
            report.surface
        }
        None => deterministic_local_vol(&snap, &cfg.strikes, &cfg.maturities)?,
    };
    let report = calibrate_slv_leverage(&snap, &spec, &cfg, &lv)?;
    write_report(ctx, &report, "leverage")
}

pub fn price(ctx: &mut Context, dump_paths: bool) -> Result<(), CliError> {
    let snap = load_market(ctx)?;
    let spec = load_model(ctx)?;
    let pc = ctx.config.price.clone().ok_or_else(|| CliError::Config {
        path: "config".into(),
        field: "price".into(),
        msg: "this command needs a [price] section".into(),
    })?;
    let ys = snap.surface.y_grid();
    let (y_lo, y_hi) = (ys[0], ys[ys.len() - 1]);
    for &t in &pc.maturities {
        if !(t > 0.0 && t <= snap.surface.max_maturity()) {
            return Err(Error::OutOfRange {
                what: "price maturity",
                value: t,
                lo: 0.0,
                hi: snap.surface.max_maturity(),
            }
            .into());
        }
        let fwd = snap.forward_price(t)?;
        for &k in &pc.strikes {
            let y = (k / fwd).ln();
            if !(y >= y_lo && y <= y_hi) {
                return Err(
                    Error::OutOfRange { what: "strike", value: k, lo: fwd * y_lo.exp(), hi: fwd * y_hi.exp() }.into()
                );
            }
        }
    }
    let surface = match (&pc.leverage, &pc.local_vol) {
        (Some(p), _) => Some(LeverageSurface::from_csv(ctx.input("leverage", p)?, SurfaceKind::Leverage)?),
        (None, Some(p)) => Some(LeverageSurface::from_csv(ctx.input("local_vol", p)?, SurfaceKind::LocalVol)?),
        (None, None) => None,
    };
    let spec = match surface {
        Some(ref s) if s.kind() == SurfaceKind::Leverage => spec,
        _ => ModelSpec { variance: None, ..spec },
    };
    let model = validate_model(&spec, &snap.domestic, &snap.foreign, surface)?;
    let grid = SimulationGrid::new(&pc.maturities, pc.dt_max)?;
    let sim = SimulationConfig { n_paths: ctx.paths.unwrap_or(pc.n_paths), seed: ctx.seed, antithetic: pc.antithetic };
    let batch = simulate_paths_with(&model, &grid, sim)?;
    let mut out = String::from("maturity,strike,log_moneyness,call_price,std_error,model_vol,market_vol\n");
    for &t in &pc.maturities {
        let sorted = SortedSlice::new(batch.slice_at(t)?, &[]);
        let fwd = snap.forward_price(t)?;
        for &k in &pc.strikes {
            let y = (k / fwd).ln();
            let c = sorted.vanilla_price(k, true);
            let model_vol = mc_implied_vol(c.value, &snap, k, t).map_or(String::new(), |v| v.vol.to_string());
            let market_vol = snap.surface.implied_vol(y, t)?;
            out.push_str(&format!("{t},{k},{y},{},{},{model_vol},{market_vol}\n", c.value, c.std_error));
        }
    }
    write_text(&ctx.output("prices.csv"), &out)?;
    if dump_paths {
        batch.dump(ctx.out.join("paths"))?;
        for f in ["s.bin", "r_d.bin", "r_f.bin", "u.bin", "mm.bin", "layout.toml"] {
            ctx.outputs.push(format!("paths/{f}"));
        }
    }
    Ok(())
}

pub fn verify(ctx: &mut Context, dump_density: bool) -> Result<(), CliError> {
    let snap = load_market(ctx)?;
    let spec = load_model(ctx)?;
    if spec.has_stochastic_rates() {
        return Err(CliError::Config {
            path: ctx.config.model.display().to_string(),
            field: "domestic.sigma".into(),
            msg: "verify runs in the deterministic-rate limit; set both rate volatilities to 0".into(),
        });
    }
    let mut v = ctx.config.verify.clone();
    if let Some(n) = ctx.paths {
        v.n_paths = n;
    }
    let (checks, dens) = run_checks(&snap, &spec, &v, ctx.seed)?;
    write_checks(&ctx.output("verify.csv"), &checks)?;
    if dump_density {
        dens.density.write_csv(ctx.output("density.csv"))?;
    }
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} = {:e} > {:e}", c.name, c.value, c.tolerance))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join("; ")))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}
