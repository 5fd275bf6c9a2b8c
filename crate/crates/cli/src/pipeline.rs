use std::fs;
use std::path::{Path, PathBuf};

use nlctf_core::config::RunConfig;
use nlctf_core::geometry::Sinogram;
use nlctf_core::metrics::{self, MetricReport};
use nlctf_core::recon::{self, Problem};
use nlctf_core::sim::{self, AttenuationProjector};
use nlctf_core::tensor::Tensor3;
use nlctf_core::volume_io::VolumeFile;
use nlctf_core::{NlctfError, Result};

use crate::preview;
use crate::Algo;

fn sinos_to_tensor(sinos: &[Sinogram]) -> Result<Tensor3> {
    let (nv, nd) = (sinos[0].n_views, sinos[0].n_det);
    let data: Vec<f64> = sinos.iter().flat_map(|s| s.values.iter().copied()).collect();
    Tensor3::from_vec([nd, nv, sinos.len()], data)
}

fn tensor_to_sinos(t: &Tensor3) -> Vec<Sinogram> {
    let [nd, nv, s] = t.dims();
    (0..s)
        .map(|c| Sinogram {
            n_views: nv,
            n_det: nd,
            values: t.slice3(c).to_vec(),
        })
        .collect()
}

fn check_grid(cfg: &RunConfig, dims: [usize; 3], what: &str) -> Result<()> {
    let g = &cfg.geometry;
    let want = [g.n_h, g.n_w, cfg.spectrum.n_bins()];
    if dims != want {
        return Err(NlctfError::Dimension(format!("{what}: dims {dims:?}, configuration expects {want:?}")));
    }
    Ok(())
}

fn write_volume(cfg: &RunConfig, path: &Path, data: Tensor3, kind: &str, units: &str) -> Result<()> {
    VolumeFile::new(data, kind, units)
        .with_bins(&cfg.spectrum.bin_edges_kev)
        .with_seed(cfg.seed)
        .write(path)
        .map_err(|e| e.context(format!("writing {}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn phantom(cfg: &RunConfig, out: &Path) -> Result<()> {
    let truth = sim::rasterize_phantom(&cfg.phantom_spec())?;
    let labels = Tensor3::from_vec(
        [cfg.geometry.n_h, cfg.geometry.n_w, 1],
        truth.labels.iter().map(|&l| f64::from(l)).collect(),
    )?;
    preview::write_channels(&truth.volume, &out.join("preview"), "truth")?;
    write_volume(cfg, &out.join("truth.raw"), truth.volume, "attenuation", "cm^-1")?;
    write_volume(cfg, &out.join("labels.raw"), labels, "labels", "material-index")
}

pub fn project(cfg: &RunConfig, out: &Path, truth: Option<PathBuf>) -> Result<()> {
    let path = truth.unwrap_or_else(|| out.join("truth.raw"));
    let file = VolumeFile::read(&path)?;
    check_grid(cfg, file.data.dims(), "truth volume")?;
    let gt = sim::GroundTruth {
        labels: vec![0; cfg.geometry.n_pixels()],
        volume: file.data,
    };
    let counts = sim::simulate_counts(&gt, &cfg.geometry, &cfg.spectrum, cfg.seed, cfg.simulation.noise)?;
    let sinos = sim::counts_to_sinogram(&counts, &cfg.spectrum)?;
    write_volume(cfg, &out.join("counts.raw"), sinos_to_tensor(&counts)?, "counts", "photons")?;
    write_volume(cfg, &out.join("sinogram.raw"), sinos_to_tensor(&sinos)?, "sinogram", "1")
}

pub fn recon(
    cfg: &RunConfig,
    out: &Path,
    algo: Algo,
    sinogram: Option<PathBuf>,
    reference: Option<PathBuf>,
) -> Result<()> {
    let path = sinogram.unwrap_or_else(|| out.join("sinogram.raw"));
    let file = VolumeFile::read(&path)?;
    let g = &cfg.geometry;
    let want = [g.n_det, g.n_views, cfg.spectrum.n_bins()];
    if file.data.dims() != want {
        return Err(NlctfError::Dimension(format!(
            "sinogram dims {:?}, configuration expects {want:?}",
            file.data.dims()
        )));
    }
    let sinos = tensor_to_sinos(&file.data);
    let reference = match reference {
        Some(p) => {
            let r = VolumeFile::read(&p)?.data;
            check_grid(cfg, r.dims(), "reference volume")?;
            Some(r)
        }
        None => None,
    };
    let projector = AttenuationProjector::new(*g)?;
    let normalizers = projector.normalizers()?;
    let problem = Problem {
        sinos: &sinos,
        projector: &projector,
        normalizers: &normalizers,
        reference: reference.as_ref(),
    };
    let (name, result) = match algo {
        Algo::Sart => ("sart", recon::sart_reconstruct(&problem, cfg.recon.outer_iters, cfg.recon.beta)?),
        Algo::Nlctf => ("nlctf", recon::nlctf_reconstruct(&problem, &cfg.recon)?),
    };
    fs::create_dir_all(out)?;
    let trace_path = out.join(format!("trace_{name}.tsv"));
    fs::write(&trace_path, recon::trace_to_text(&result.trace))?;
    println!("wrote {}", trace_path.display());
    if let Some(last) = result.trace.last().and_then(|r| r.mean_rmse()) {
        println!("final mean rmse {last}");
    }
    preview::write_channels(&result.volume, &out.join("preview"), &format!("recon_{name}"))?;
    write_volume(cfg, &out.join(format!("recon_{name}.raw")), result.volume, "attenuation", "cm^-1")
}

pub fn evaluate(out: &Path, volume: &Path, reference: &Path) -> Result<()> {
    let x = VolumeFile::read(volume)?.data;
    let r = VolumeFile::read(reference)?.data;
    let report = MetricReport::evaluate(&x, &r)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.txt"), report.to_key_value())?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    print!("{}", report.to_key_value());
    Ok(())
}

pub fn decompose(cfg: &RunConfig, out: &Path, volume: &Path) -> Result<()> {
    let x = VolumeFile::read(volume)?.data;
    check_grid(cfg, x.dims(), "volume")?;
    let basis = cfg.basis();
    let d = metrics::decompose(&x, &basis)?;
    if d.ill_conditioned() {
        eprintln!(
            "warning: basis condition number {:.3e} exceeds {:.0e}",
            d.condition_number,
            metrics::CONDITION_WARNING
        );
    }
    let [rows, cols, _] = x.dims();
    let mean_residual = d.residual.iter().sum::<f64>() / d.residual.len() as f64;
    let mut text = format!("condition_number={}\nresidual.mean={mean_residual}\n", d.condition_number);
    for (m, name) in basis.names.iter().enumerate() {
        text += &format!("material.{m}={name}\n");
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("decomposition.txt"), &text)?;
    print!("{text}");
    preview::write_overlay(&d.fractions, &out.join("overlay.png"))?;
    let residual = Tensor3::from_vec([rows, cols, 1], d.residual)?;
    write_volume(cfg, &out.join("residual.raw"), residual, "decomposition-residual", "cm^-1")?;
    write_volume(cfg, &out.join("fractions.raw"), d.fractions, "fractions", "1")
}
