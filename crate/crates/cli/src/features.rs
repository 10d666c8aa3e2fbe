//! Feature-map export: embed images and render the first 16 channels as a
//! PNG tile grid (one row per image, min-max scaled per channel) plus a CSV
//! of the raw values.

use crate::config::Config;
use fewshot_core::episodes::{load_single_image, Normalization};
use fewshot_core::{FewShotModel, Graph, Result, Scalar, Tensor};
use std::io::Write;
use std::path::{Path, PathBuf};

const CHANNELS_SHOWN: usize = 16;
const TILE_SCALE: usize = 4;
const GAP: usize = 2;

pub fn dump_features<S: Scalar>(
    model: &FewShotModel<S>,
    cfg: &Config,
    images: &[PathBuf],
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    assert!(!images.is_empty(), "dump-features needs at least one image");
    std::fs::create_dir_all(out_dir)?;

    // decode + normalize with the dataset pipeline rules
    let plane = cfg.image_size * cfg.image_size;
    let per_image = cfg.channels * plane;
    let mut data = vec![S::zero(); images.len() * per_image];
    for (i, path) in images.iter().enumerate() {
        let img = load_single_image(path, cfg.image_size, cfg.channels)?;
        let dst = &mut data[i * per_image..][..per_image];
        for c in 0..cfg.channels {
            let Normalization { mean, std } = &cfg.norm;
            for p in 0..plane {
                let v = img.pixels[c * plane + p] as f64 / 255.0;
                dst[c * plane + p] = S::from_f64((v - mean[c]) / std[c]);
            }
        }
    }
    let batch = Tensor::from_vec(
        &[images.len(), cfg.channels, cfg.image_size, cfg.image_size],
        data,
    );

    let mut g: Graph<S> = Graph::new();
    let input = g.constant(batch);
    let feats_id = model.embed.embed(&mut g, input, false)?;
    let feats = g.value(feats_id);
    let sh = feats.shape().to_vec();
    let (n, c, fh, fw) = (sh[0], sh[1], sh[2], sh[3]);
    let shown = c.min(CHANNELS_SHOWN);
    let fd = feats.data();

    // CSV of raw values
    let csv_path = out_dir.join("features.csv");
    {
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "image,channel,row,col,value")?;
        for i in 0..n {
            for ch in 0..shown {
                for y in 0..fh {
                    for x in 0..fw {
                        let v = fd[((i * c + ch) * fh + y) * fw + x].as_f64();
                        writeln!(f, "{i},{ch},{y},{x},{v}")?;
                    }
                }
            }
        }
    }

    // PNG grid: rows = images, cols = channels; min-max per channel tile,
    // constant channels render mid-gray
    let tile_w = fw * TILE_SCALE;
    let tile_h = fh * TILE_SCALE;
    let img_w = shown * tile_w + (shown + 1) * GAP;
    let img_h = n * tile_h + (n + 1) * GAP;
    let mut canvas = image::GrayImage::from_pixel(img_w as u32, img_h as u32, image::Luma([255u8]));
    for i in 0..n {
        for ch in 0..shown {
            let base = (i * c + ch) * fh * fw;
            let tile = &fd[base..base + fh * fw];
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in tile {
                lo = lo.min(v.as_f64());
                hi = hi.max(v.as_f64());
            }
            let range = hi - lo;
            let ox = GAP + ch * (tile_w + GAP);
            let oy = GAP + i * (tile_h + GAP);
            for y in 0..fh {
                for x in 0..fw {
                    let v = tile[y * fw + x].as_f64();
                    let px = if range > 0.0 {
                        (((v - lo) / range) * 255.0).round() as u8
                    } else {
                        128
                    };
                    for sy in 0..TILE_SCALE {
                        for sx in 0..TILE_SCALE {
                            canvas.put_pixel(
                                (ox + x * TILE_SCALE + sx) as u32,
                                (oy + y * TILE_SCALE + sy) as u32,
                                image::Luma([px]),
                            );
                        }
                    }
                }
            }
        }
    }
    let png_path = out_dir.join("features.png");
    canvas
        .save(&png_path)
        .map_err(|e| fewshot_core::Error::Data(format!("cannot write {}: {e}", png_path.display())))?;
    Ok((png_path, csv_path))
}
