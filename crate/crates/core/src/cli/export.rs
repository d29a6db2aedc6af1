use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Tadformer;
use crate::mtl::{Batch, SynthSample};
use crate::params::ParamStore;
use crate::peft::{self, TuningMode};
use crate::tensor::{Tape, Tensor};

/// Head-averaged task attention of one stage, `maps[task][patch]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTam {
    pub stage: usize,
    pub grid: (usize, usize),
    pub maps: Vec<Vec<f64>>,
}

/// Mean over heads of `tam[0, :, task, :]` for a `[B×H×T×N]` map.
pub fn head_average(tam: &Tensor<f32>, task: usize) -> Vec<f64> {
    let s = tam.shape();
    let (h, n) = (s[1], s[3]);
    (0..n)
        .map(|j| (0..h).map(|hd| tam.at(&[0, hd, task, j]) as f64).sum::<f64>() / h as f64)
        .collect()
}

/// Min-max scaling to `0..=255`, rounded; a constant map becomes 128.
pub fn normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Binary 8-bit greymap.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

/// Task attention of every stage for one sample.
pub fn task_attention_maps(
    model: &Tadformer,
    store: &ParamStore<f32>,
    mode: TuningMode,
    sample: &SynthSample,
) -> Result<Vec<StageTam>> {
    if !mode.uses_prompts() || model.prompts.is_none() {
        return Err(Error::config(format!("mode: `{mode}` has no task prompts, so there is no task attention to export")));
    }
    let batch = Batch::collate(std::slice::from_ref(sample));
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, &vec![false; store.len()]);
    let images = tape.constant(batch.images);
    let out = model.forward(&mut tape, &vars, images, mode)?;
    let mut stages = Vec::new();
    for (s, trace) in out.stages.iter().enumerate() {
        if trace.prompts == 0 {
            continue;
        }
        let tam = peft::extract_task_attention_map(&mut tape, trace.attn, trace.prompts)?;
        let tam = tape.value(tam);
        let maps = (0..trace.prompts).map(|i| head_average(tam, i)).collect();
        stages.push(StageTam { stage: s, grid: trace.grid, maps });
    }
    Ok(stages)
}

/// Writes `tam_stage{s}_task{i}.pgm` into `dir` and returns the paths.
pub fn export_tam(stages: &[StageTam], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for st in stages {
        for (i, map) in st.maps.iter().enumerate() {
            let path = dir.join(format!("tam_stage{}_task{i}.pgm", st.stage));
            write_pgm(&path, st.grid.1, st.grid.0, &normalize_to_u8(map))?;
            paths.push(path);
        }
    }
    Ok(paths)
}
