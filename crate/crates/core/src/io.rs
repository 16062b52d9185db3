//! Plain CSV/JSON persistence for agent trajectories and Euler snapshots.
//!
//! A trajectory directory holds `snapshot_NNN.csv` (`id,x[,y],u[,v]`) and
//! `manifest.json`. A field directory holds `field_NNN.csv`
//! (`x_center,rho,m,u` in 1D; `x_center,y_center,rho,m1,m2,u,v` in 2D),
//! heatmap matrices `rho_NNN.csv`, `u_NNN.csv`, `v_NNN.csv` in 2D, and
//! `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{BoxDomain, Snapshot, TrajectoryLog};
use crate::error::{Error, Result};
use crate::fvm1d::{ConservedField1D, EulerSolution1D, Grid1D, RunStats};
use crate::fvm2d::{ConservedField2D, EulerSolution2D, Grid2D};
use crate::scalar::Real;

pub const MANIFEST: &str = "manifest.json";

const AXES: [&str; 2] = ["x", "y"];
const VELS: [&str; 2] = ["u", "v"];

fn snapshot_name(k: usize) -> String {
    format!("snapshot_{k:03}.csv")
}

fn field_name(k: usize) -> String {
    format!("field_{k:03}.csv")
}

pub fn write_json<S: Serialize>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<S: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<S> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_columns<T: Real>(path: &Path, expect: &[&str]) -> Result<Vec<Vec<T>>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != expect {
        return Err(Error::Format(format!(
            "{}: expected columns {:?}, found {:?}",
            path.display(),
            expect,
            header
        )));
    }
    let mut cols = vec![Vec::new(); expect.len()];
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<T> = rec.deserialize(None)?;
        for (c, v) in cols.iter_mut().zip(vals) {
            c.push(v);
        }
    }
    Ok(cols)
}

/// JSON manifest of a trajectory directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TrajectoryManifest<T> {
    pub dimension: usize,
    pub alpha_used: T,
    pub dt: T,
    pub seed: u64,
    pub sample_times: Vec<T>,
    #[serde(rename = "N")]
    pub n: usize,
    pub domain: DomainBounds<T>,
    pub max_substeps: usize,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DomainBounds<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

/// Writes one CSV per snapshot plus the manifest. Returns the CSV paths.
pub fn write_trajectory<T: Real, const D: usize>(log: &TrajectoryLog<T, D>, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let header: Vec<String> = std::iter::once("id".to_owned())
        .chain(AXES[..D].iter().map(|s| (*s).to_owned()))
        .chain(VELS[..D].iter().map(|s| (*s).to_owned()))
        .collect();
    let mut paths = Vec::with_capacity(log.snapshots.len());
    for (k, s) in log.snapshots.iter().enumerate() {
        let p = dir.join(snapshot_name(k));
        let rows = s.positions.iter().zip(&s.velocities).enumerate().map(|(i, (x, v))| {
            std::iter::once(i.to_string())
                .chain(x.iter().map(|c| c.to_string()))
                .chain(v.iter().map(|c| c.to_string()))
                .collect()
        });
        write_rows(&p, &header, rows)?;
        paths.push(p);
    }
    let manifest = TrajectoryManifest {
        dimension: D,
        alpha_used: log.alpha_used,
        dt: log.dt,
        seed: log.seed,
        sample_times: log.sample_times(),
        n: log.particle_count(),
        domain: DomainBounds {
            lower: log.domain.lower.to_vec(),
            upper: log.domain.upper.to_vec(),
        },
        max_substeps: log.max_substeps,
        files: (0..log.snapshots.len()).map(snapshot_name).collect(),
    };
    write_json(dir.join(MANIFEST), &manifest)?;
    Ok(paths)
}

/// Reads a trajectory directory back.
pub fn read_trajectory<T: Real, const D: usize>(dir: impl AsRef<Path>) -> Result<TrajectoryLog<T, D>> {
    let dir = dir.as_ref();
    let man: TrajectoryManifest<T> = read_json(dir.join(MANIFEST))?;
    if man.dimension != D {
        return Err(Error::Format(format!(
            "trajectory is {}-dimensional, expected {D}",
            man.dimension
        )));
    }
    if man.files.len() != man.sample_times.len() {
        return Err(Error::Format("manifest lists a different number of files and times".into()));
    }
    let to_arr = |v: &[T]| -> Result<[T; D]> {
        v.try_into()
            .map_err(|_| Error::Format("domain bounds have the wrong dimension".into()))
    };
    let domain = BoxDomain::new(to_arr(&man.domain.lower)?, to_arr(&man.domain.upper)?)?;
    let mut expect = vec!["id"];
    expect.extend_from_slice(&AXES[..D]);
    expect.extend_from_slice(&VELS[..D]);
    let mut snapshots = Vec::with_capacity(man.files.len());
    for (f, t) in man.files.iter().zip(&man.sample_times) {
        let cols = read_columns::<T>(&dir.join(f), &expect)?;
        let n = cols[0].len();
        let mut positions = vec![[T::zero(); D]; n];
        let mut velocities = vec![[T::zero(); D]; n];
        for i in 0..n {
            for d in 0..D {
                positions[i][d] = cols[1 + d][i];
                velocities[i][d] = cols[1 + D + d][i];
            }
        }
        snapshots.push(Snapshot {
            time: *t,
            positions,
            velocities,
        });
    }
    let log = TrajectoryLog {
        alpha_used: man.alpha_used,
        dt: man.dt,
        seed: man.seed,
        domain,
        max_substeps: man.max_substeps,
        snapshots,
    };
    log.validate()?;
    if log.particle_count() != man.n && !log.snapshots.is_empty() {
        return Err(Error::Format(format!(
            "manifest says N = {}, files hold {}",
            man.n,
            log.particle_count()
        )));
    }
    Ok(log)
}

/// Mass and momentum at the first and last recorded times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ConservationTable<T> {
    pub mass_initial: T,
    pub mass_final: T,
    pub momentum_initial: Vec<T>,
    pub momentum_final: Vec<T>,
    /// `|M(T) - M(0)| / |M(0)|`.
    pub mass_drift: T,
    /// Per component `|P(T) - P(0)| / max(|P(0)|, sum |m| dx)`.
    pub momentum_drift: Vec<T>,
}

impl<T: Real> ConservationTable<T> {
    pub fn max_drift(&self) -> T {
        self.momentum_drift.iter().copied().fold(self.mass_drift, T::max)
    }
}

fn drift<T: Real>(initial: T, fin: T, scale: T) -> T {
    let s = initial.abs().max(scale);
    if s > T::zero() { (fin - initial).abs() / s } else { (fin - initial).abs() }
}

pub fn conservation_1d<T: Real>(sol: &EulerSolution1D<T>) -> Option<ConservationTable<T>> {
    let dx = sol.grid.dx();
    let (a, b) = (sol.fields.first()?, sol.fields.last()?);
    let scale = a.m.iter().map(|v| v.abs()).sum::<T>() * dx;
    let (p0, p1) = (a.total_momentum(dx), b.total_momentum(dx));
    let (m0, m1) = (a.total_mass(dx), b.total_mass(dx));
    Some(ConservationTable {
        mass_initial: m0,
        mass_final: m1,
        momentum_initial: vec![p0],
        momentum_final: vec![p1],
        mass_drift: drift(m0, m1, T::zero()),
        momentum_drift: vec![drift(p0, p1, scale)],
    })
}

pub fn conservation_2d<T: Real>(sol: &EulerSolution2D<T>) -> Option<ConservationTable<T>> {
    let area = sol.grid.dx() * sol.grid.dy();
    let (a, b) = (sol.fields.first()?, sol.fields.last()?);
    let s1 = a.m1.iter().map(|v| v.abs()).sum::<T>() * area;
    let s2 = a.m2.iter().map(|v| v.abs()).sum::<T>() * area;
    let (p0, p1) = (a.total_momentum(area), b.total_momentum(area));
    let (m0, m1) = (a.total_mass(area), b.total_mass(area));
    Some(ConservationTable {
        mass_initial: m0,
        mass_final: m1,
        momentum_initial: vec![p0.0, p0.1],
        momentum_final: vec![p1.0, p1.1],
        mass_drift: drift(m0, m1, T::zero()),
        momentum_drift: vec![drift(p0.0, p1.0, s1), drift(p0.1, p1.1, s2)],
    })
}

/// JSON manifest of a field directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FieldManifest<T> {
    pub dimension: usize,
    pub alpha: T,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    pub domain: DomainBounds<T>,
    pub times: Vec<T>,
    pub dt_min: T,
    pub dt_max: T,
    #[serde(rename = "CFL")]
    pub cfl: T,
    pub max_cfl: T,
    pub steps: usize,
    pub warnings: Vec<String>,
    pub conservation: Option<ConservationTable<T>>,
    pub files: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn field_manifest<T: Real>(
    dimension: usize,
    alpha: T,
    cells: (usize, Option<usize>),
    domain: DomainBounds<T>,
    times: &[T],
    stats: &RunStats<T>,
    cfl: T,
    conservation: Option<ConservationTable<T>>,
) -> FieldManifest<T> {
    FieldManifest {
        dimension,
        alpha,
        k: cells.0,
        l: cells.1,
        domain,
        times: times.to_vec(),
        dt_min: if stats.steps > 0 { stats.dt_min } else { T::zero() },
        dt_max: stats.dt_max,
        cfl,
        max_cfl: stats.max_cfl,
        steps: stats.steps,
        warnings: stats.warnings.clone(),
        conservation,
        files: (0..times.len()).map(field_name).collect(),
    }
}

/// Writes the 1D snapshots and manifest; `cfl` is the configured limit.
pub fn write_solution_1d<T: Real>(sol: &EulerSolution1D<T>, cfl: T, dir: impl AsRef<Path>) -> Result<FieldManifest<T>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let header: Vec<String> = ["x_center", "rho", "m", "u"].iter().map(|s| (*s).to_owned()).collect();
    let centers = sol.grid.centers();
    for (k, f) in sol.fields.iter().enumerate() {
        let u = f.velocity();
        let rows = (0..f.len()).map(|j| {
            vec![centers[j].to_string(), f.rho[j].to_string(), f.m[j].to_string(), u[j].to_string()]
        });
        write_rows(&dir.join(field_name(k)), &header, rows)?;
    }
    let man = field_manifest(
        1,
        sol.alpha,
        (sol.grid.cells(), None),
        DomainBounds {
            lower: vec![sol.grid.a()],
            upper: vec![sol.grid.b()],
        },
        &sol.times,
        &sol.stats,
        cfl,
        conservation_1d(sol),
    );
    write_json(dir.join(MANIFEST), &man)?;
    Ok(man)
}

/// Writes the 2D snapshots, heatmaps and manifest.
pub fn write_solution_2d<T: Real>(sol: &EulerSolution2D<T>, cfl: T, dir: impl AsRef<Path>) -> Result<FieldManifest<T>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let g = &sol.grid;
    let header: Vec<String> = ["x_center", "y_center", "rho", "m1", "m2", "u", "v"]
        .iter()
        .map(|s| (*s).to_owned())
        .collect();
    for (k, f) in sol.fields.iter().enumerate() {
        let (u, v) = f.velocity();
        let rows = (0..g.ny()).flat_map(|j| (0..g.nx()).map(move |i| (i, j))).map(|(i, j)| {
            let c = g.index(i, j);
            let (x, y) = g.center(i, j);
            vec![
                x.to_string(),
                y.to_string(),
                f.rho[c].to_string(),
                f.m1[c].to_string(),
                f.m2[c].to_string(),
                u[c].to_string(),
                v[c].to_string(),
            ]
        });
        write_rows(&dir.join(field_name(k)), &header, rows)?;
        for (name, data) in [("rho", &f.rho), ("u", &u), ("v", &v)] {
            write_heatmap(g, data, &dir.join(format!("{name}_{k:03}.csv")))?;
        }
    }
    let (x, y) = (g.x_range(), g.y_range());
    let man = field_manifest(
        2,
        sol.alpha,
        (g.nx(), Some(g.ny())),
        DomainBounds {
            lower: vec![x.0, y.0],
            upper: vec![x.1, y.1],
        },
        &sol.times,
        &sol.stats,
        cfl,
        conservation_2d(sol),
    );
    write_json(dir.join(MANIFEST), &man)?;
    Ok(man)
}

/// Matrix CSV: header `y\x` then the x centers; one row per y center.
pub fn write_heatmap<T: Real>(grid: &Grid2D<T>, data: &[T], path: &Path) -> Result<()> {
    let header: Vec<String> = std::iter::once("y\\x".to_owned())
        .chain((0..grid.nx()).map(|i| grid.center(i, 0).0.to_string()))
        .collect();
    let rows = (0..grid.ny()).map(|j| {
        std::iter::once(grid.center(0, j).1.to_string())
            .chain((0..grid.nx()).map(|i| data[grid.index(i, j)].to_string()))
            .collect()
    });
    write_rows(path, &header, rows)
}

/// Reads a 1D field directory back (times, grid, fields).
pub fn read_solution_1d<T: Real>(dir: impl AsRef<Path>) -> Result<EulerSolution1D<T>> {
    let dir = dir.as_ref();
    let man: FieldManifest<T> = read_json(dir.join(MANIFEST))?;
    if man.dimension != 1 || man.domain.lower.len() != 1 || man.domain.upper.len() != 1 {
        return Err(Error::Format("field directory is not one-dimensional".into()));
    }
    let grid = Grid1D::new(man.domain.lower[0], man.domain.upper[0], man.k)?;
    let mut fields = Vec::with_capacity(man.files.len());
    for f in &man.files {
        let cols = read_columns::<T>(&dir.join(f), &["x_center", "rho", "m", "u"])?;
        if cols[1].len() != man.k {
            return Err(Error::Format(format!("{f}: expected {} cells", man.k)));
        }
        fields.push(ConservedField1D {
            rho: cols[1].clone(),
            m: cols[2].clone(),
        });
    }
    Ok(EulerSolution1D {
        grid,
        alpha: man.alpha,
        times: man.times,
        fields,
        stats: RunStats::default(),
    })
}

/// Reads a 2D field directory back.
pub fn read_solution_2d<T: Real>(dir: impl AsRef<Path>) -> Result<EulerSolution2D<T>> {
    let dir = dir.as_ref();
    let man: FieldManifest<T> = read_json(dir.join(MANIFEST))?;
    let l = man.l.ok_or_else(|| Error::Format("field directory is not two-dimensional".into()))?;
    if man.dimension != 2 || man.domain.lower.len() != 2 || man.domain.upper.len() != 2 {
        return Err(Error::Format("field directory is not two-dimensional".into()));
    }
    let grid = Grid2D::new(
        (man.domain.lower[0], man.domain.upper[0]),
        (man.domain.lower[1], man.domain.upper[1]),
        man.k,
        l,
    )?;
    let mut fields = Vec::with_capacity(man.files.len());
    for f in &man.files {
        let cols = read_columns::<T>(&dir.join(f), &["x_center", "y_center", "rho", "m1", "m2", "u", "v"])?;
        if cols[2].len() != grid.len() {
            return Err(Error::Format(format!("{f}: expected {} cells", grid.len())));
        }
        fields.push(ConservedField2D {
            rho: cols[2].clone(),
            m1: cols[3].clone(),
            m2: cols[4].clone(),
        });
    }
    Ok(EulerSolution2D {
        grid,
        alpha: man.alpha,
        times: man.times,
        fields,
        stats: RunStats::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{simulate, AgentRunParams, ParticleEnsemble};
    use crate::kernel::KernelSpec;

    #[test]
    fn trajectory_roundtrip_is_exact() {
        let dom = BoxDomain::new([0.0, 0.0], [1.0, 1.0]).unwrap();
        let pos = vec![[0.1, 0.2], [0.7, 0.4], [0.5, 0.9]];
        let e = ParticleEnsemble::with_velocity_field(pos, &dom, |p| [p[1] - 0.5, 0.3 * p[0]]).unwrap();
        let spec = KernelSpec::new(0.5, 2).unwrap();
        let log = simulate(e, &dom, &spec, &AgentRunParams::new(0.01, 0.05, 1e-4), &[0.0, 0.05]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(&log, dir.path()).unwrap();
        let back: TrajectoryLog<f64, 2> = read_trajectory(dir.path()).unwrap();
        assert_eq!(back, log);
        let head = fs::read_to_string(dir.path().join("snapshot_000.csv")).unwrap();
        assert!(head.starts_with("id,x,y,u,v\n"));
        assert!(read_trajectory::<f64, 1>(dir.path()).is_err());
    }
}
