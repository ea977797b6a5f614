use crate::align::head::Linear;
use crate::error::{Error, Result};
use crate::numerics::ops::normalize_backward;
use crate::numerics::{dot, norm, resize_bilinear, FeatureMap};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageAlignOutput {
    pub loss: f64,
    pub grad_convs: Vec<Linear>,
    /// Gradient w.r.t. each student map, same layout as the map data.
    pub grad_maps: Vec<Vec<f64>>,
    /// Cells where either side had zero norm (term fixed at 1, no gradient).
    pub degenerate_cells: usize,
}

/// Mean over levels of the mean per-cell `1 - cos(conv_l(x), v)`, where `v` is
/// the VFM map bilinearly resized to the level's grid.
pub fn image_alignment_loss(
    student_maps: &[FeatureMap<f64>],
    vfm: &FeatureMap<f64>,
    convs: &[Linear],
) -> Result<ImageAlignOutput> {
    let targets = student_maps
        .iter()
        .map(|m| resize_bilinear(vfm, m.height(), m.width()))
        .collect::<Result<Vec<_>>>()?;
    image_alignment_loss_with_targets(student_maps, &targets, convs)
}

/// Same as [`image_alignment_loss`] with the resized VFM maps supplied per level.
pub fn image_alignment_loss_with_targets(
    student_maps: &[FeatureMap<f64>],
    targets: &[FeatureMap<f64>],
    convs: &[Linear],
) -> Result<ImageAlignOutput> {
    if student_maps.is_empty() || student_maps.len() != convs.len() || targets.len() != convs.len()
    {
        return Err(Error::Domain(
            "need one conv and one target per student level".into(),
        ));
    }
    let levels = student_maps.len() as f64;
    let mut loss = 0.0;
    let mut grad_convs = Vec::with_capacity(convs.len());
    let mut grad_maps = Vec::with_capacity(convs.len());
    let mut degenerate = 0;
    for ((map, target), conv) in student_maps.iter().zip(targets).zip(convs) {
        conv.check()?;
        if conv.input != map.channels() || conv.output != target.channels() {
            return Err(Error::Domain(format!(
                "conv {}->{} does not fit student {} / VFM {} channels",
                conv.input,
                conv.output,
                map.channels(),
                target.channels()
            )));
        }
        if (map.height(), map.width()) != (target.height(), target.width()) {
            return Err(Error::Domain(
                "target grid differs from student level".into(),
            ));
        }
        let cells = map.num_cells() as f64;
        let w = 1.0 / (cells * levels);
        let mut g_conv = Linear::zeros(conv.input, conv.output);
        let mut g_map = vec![0.0; map.data().len()];
        let c_in = map.channels();
        let mut level = 0.0;
        for (idx, (x, v)) in map.cells().zip(target.cells()).enumerate() {
            let y = conv.forward(x);
            let (ny, nv) = (norm(&y), norm(v));
            if ny < NORM_FLOOR || nv < NORM_FLOOR {
                degenerate += 1;
                level += 1.0;
                continue;
            }
            let y_hat: Vec<f64> = y.iter().map(|a| a / ny).collect();
            let v_hat: Vec<f64> = v.iter().map(|a| a / nv).collect();
            level += 1.0 - dot(&y_hat, &v_hat);
            let g_y: Vec<f64> = normalize_backward(&y_hat, ny, &v_hat)
                .into_iter()
                .map(|g| -w * g)
                .collect();
            let g_x = conv.backward(x, &g_y, &mut g_conv);
            g_map[idx * c_in..(idx + 1) * c_in].copy_from_slice(&g_x);
        }
        loss += level / cells;
        grad_convs.push(g_conv);
        grad_maps.push(g_map);
    }
    Ok(ImageAlignOutput {
        loss: loss / levels,
        grad_convs,
        grad_maps,
        degenerate_cells: degenerate,
    })
}
