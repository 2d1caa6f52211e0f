use std::fs;

use anyhow::{anyhow, Context};
use vlt_core::data::{encode_ppm, read_dataset, tensor_to_rgb, Vocabulary};
use vlt_core::model::{ForwardOptions, VltParams};
use vlt_core::tensor::Tensor;
use vlt_core::train::{binarize, Checkpoint, TrainError};

use super::{write_file, CmdResult, VizArgs};

/// Colour blended into predicted foreground pixels.
const OVERLAY: [u8; 3] = [255, 0, 255];

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Affine map of `values` onto `0..=255`; a constant input maps to 0.
pub fn min_max_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

fn values_tsv(header: &[String], rows: &[&[f64]]) -> String {
    let mut out = header.join("\t") + "\n";
    for r in rows {
        out += &r.iter().map(f64::to_string).collect::<Vec<_>>().join("\t");
        out += "\n";
    }
    out
}

pub fn run(a: VizArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.ckpt).map_err(TrainError::from)?;
    let samples = read_dataset(&a.data, &Vocabulary::grammar()).context("reading dataset")?;
    let sample = samples
        .iter()
        .find(|s| s.sample_id == a.sample)
        .ok_or_else(|| anyhow!("no sample with id {} in {}", a.sample, a.data.display()))?;
    vlt_core::train::check_sample(&ckpt.config, sample)?;
    let cfg = &ckpt.config;
    let (model, _) = VltParams::layout(cfg).map_err(TrainError::from)?;
    let opts = ForwardOptions {
        record_attention: true,
        ..ForwardOptions::default()
    };
    let trace = model
        .trace(&ckpt.params, &sample.image, &sample.tokens, opts)
        .map_err(TrainError::from)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let (fh, fw) = (cfg.feature_height(), cfg.feature_width());
    let (py, px) = a.point.unwrap_or((fh / 2, fw / 2));
    if py >= fh || px >= fw {
        return Err(anyhow!("point {py},{px} outside the {fh}×{fw} feature grid").into());
    }
    let heads = trace
        .encoder_attention
        .last()
        .ok_or_else(|| anyhow!("model has no encoder attention"))?;
    let n = fh * fw;
    let row = py * fw + px;
    let mut mean = vec![0.0; n];
    for h in heads {
        for (m, v) in mean.iter_mut().zip(&h.data()[row * n..(row + 1) * n]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= heads.len() as f64);
    write_file(
        &a.out.join("encoder_attention.pgm"),
        &encode_pgm(fw, fh, &min_max_u8(&mean)),
    )?;
    let grid_rows: Vec<&[f64]> = mean.chunks(fw).collect();
    let cols: Vec<String> = (0..fw).map(|c| format!("col{c}")).collect();
    write_file(
        &a.out.join("encoder_attention.tsv"),
        values_tsv(&cols, &grid_rows).as_bytes(),
    )?;

    match &trace.word_attention {
        Some(att) => write_word_attention(&a, att, &sample.words, cfg.max_words)?,
        None => eprintln!(
            "query source {} has no word attention; skipping its grid",
            cfg.query_source.tag()
        ),
    }

    let mut rgb = tensor_to_rgb(&sample.image);
    for (p, on) in binarize(&trace.logits).into_iter().enumerate() {
        if on {
            for c in 0..3 {
                rgb[p * 3 + c] = ((rgb[p * 3 + c] as u16 + OVERLAY[c] as u16) / 2) as u8;
            }
        }
    }
    write_file(
        &a.out.join("overlay.ppm"),
        &encode_ppm(cfg.image_width, cfg.image_height, &rgb),
    )?;
    println!("wrote heatmaps for sample {} to {}", a.sample, a.out.display());
    Ok(())
}

/// Rows are queries and columns are word positions, each drawn as a
/// `cell×cell` block.
fn write_word_attention(a: &VizArgs, att: &Tensor, words: &[String], max_words: usize) -> anyhow::Result<()> {
    let (nq, nl) = (att.shape()[0], att.shape()[1]);
    let cell = a.cell.max(1);
    let levels = min_max_u8(att.data());
    let (w, h) = (nl * cell, nq * cell);
    let mut gray = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            gray[y * w + x] = levels[(y / cell) * nl + x / cell];
        }
    }
    write_file(&a.out.join("word_attention.pgm"), &encode_pgm(w, h, &gray))?;
    let header: Vec<String> = (0..max_words)
        .map(|i| words.get(i).cloned().unwrap_or_else(|| "<pad>".into()))
        .collect();
    let rows: Vec<&[f64]> = att.data().chunks(nl).collect();
    write_file(&a.out.join("word_attention.tsv"), values_tsv(&header, &rows).as_bytes())
}
