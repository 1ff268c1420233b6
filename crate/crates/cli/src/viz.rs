//! Feature-map and filter mosaics.

use std::fs;

use fined_core::dataset::to_rgb;
use fined_core::io::{read_image, write_image, BitDepth};
use fined_core::network::{load_params_for, LayerOp, LoadMode};
use fined_core::{Graph, Mode, NetworkSpec, Shape, Tensor};

use crate::{CliError, CliResult, VizArgs};

const FILTER_ZOOM: usize = 8;

pub fn run(a: &VizArgs) -> CliResult<()> {
    let graph = Graph::build(&NetworkSpec::new(a.net.spec, Mode::from(a.mode)))?;
    let layer_idx = graph
        .layer_index(&a.layer)
        .ok_or_else(|| fined_core::Error::UnknownLayer {
            name: a.layer.clone(),
            valid: graph.layer_names().join(", "),
        })?;
    if a.max_maps == 0 {
        return Err(CliError::Usage("--max-maps must be at least 1".into()));
    }
    let params = load_params_for(&a.weights, &graph, LoadMode::Lenient)?;
    let image = to_rgb(read_image(&a.image)?);
    let act = graph
        .activations(&params, &image, &[a.layer.as_str()])?
        .pop()
        .expect("one layer requested");

    fs::create_dir_all(&a.out).map_err(|e| fined_core::Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let stem = a.layer.replace('.', "_");
    let s = act.shape();
    let shown = s.c.min(a.max_maps);
    let tiles: Vec<Vec<f32>> = (0..shown).map(|c| normalize(act.plane(0, c))).collect();
    let maps = mosaic(&tiles, s.h, s.w, 1);
    let maps_path = a.out.join(format!("{stem}_maps.png"));
    write_image(&maps_path, &maps, BitDepth::Eight)?;
    println!("{} of {} channels -> {}", shown, s.c, maps_path.display());

    if let LayerOp::Conv { param, spec, .. } = &graph.layers()[layer_idx].op {
        if spec.in_c == 3 {
            let w = params
                .get(&format!("{param}.weight"))
                .expect("bound store holds every conv weight");
            let filters = filter_mosaic(w);
            let path = a.out.join(format!("{stem}_filters.png"));
            write_image(&path, &filters, BitDepth::Eight)?;
            println!("{} filters -> {}", spec.out_c, path.display());
        }
    }
    Ok(())
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
fn normalize(plane: &[f32]) -> Vec<f32> {
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    plane
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

fn grid_dims(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (n.div_ceil(cols), cols)
}

/// Lays `tiles` (each `channels × h × w`, planar) out on a near-square grid
/// with 1-pixel black gutters.
fn mosaic(tiles: &[Vec<f32>], h: usize, w: usize, channels: usize) -> Tensor<f32> {
    let (rows, cols) = grid_dims(tiles.len());
    let (gh, gw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut out = Tensor::zeros(Shape::new(1, channels, gh, gw));
    for (k, tile) in tiles.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (h + 1), (k % cols) * (w + 1));
        for c in 0..channels {
            let plane = out.plane_mut(0, c);
            for y in 0..h {
                let src = &tile[c * h * w + y * w..c * h * w + (y + 1) * w];
                plane[(oy + y) * gw + ox..(oy + y) * gw + ox + w].copy_from_slice(src);
            }
        }
    }
    out
}

/// RGB tiles of `(out, 3, kh, kw)` filters, enlarged, with zero at mid-grey.
fn filter_mosaic(w: &Tensor<f32>) -> Tensor<f32> {
    let s = w.shape();
    let max = w.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { 0.5 / max } else { 0.0 };
    let (th, tw) = (s.h * FILTER_ZOOM, s.w * FILTER_ZOOM);
    let tiles: Vec<Vec<f32>> = (0..s.n)
        .map(|o| {
            let mut t = vec![0.0; 3 * th * tw];
            for c in 0..3 {
                for y in 0..th {
                    for x in 0..tw {
                        let v = w.at(o, c, y / FILTER_ZOOM, x / FILTER_ZOOM);
                        t[c * th * tw + y * tw + x] = 0.5 + v * scale;
                    }
                }
            }
            t
        })
        .collect();
    mosaic(&tiles, th, tw, 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_near_square() {
        assert_eq!(grid_dims(16), (4, 4));
        assert_eq!(grid_dims(10), (3, 4));
        assert_eq!(grid_dims(1), (1, 1));
    }

    #[test]
    fn mosaic_places_tiles_with_gutters() {
        let tiles = vec![vec![1.0; 4], vec![0.5; 4]];
        let m = mosaic(&tiles, 2, 2, 1);
        assert_eq!(m.shape(), Shape::new(1, 1, 2, 5));
        assert_eq!(
            m.data(),
            &[1.0, 1.0, 0.0, 0.5, 0.5, 1.0, 1.0, 0.0, 0.5, 0.5]
        );
    }

    #[test]
    fn normalize_handles_constant_maps() {
        assert_eq!(normalize(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize(&[7.0; 3]), vec![0.0; 3]);
    }
}
