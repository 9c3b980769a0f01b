//! Tape bridge for the rasterizer: one fused differentiable op that takes
//! the decoded Gaussian attributes plus a background color and yields a
//! [H*W, 4] image of RGB and alpha columns. The forward pass is the tiled
//! renderer; the backward pass is the analytic one. Depth and normals stay
//! outside the tape on purpose.

use crate::autodiff::{custom_op, tape_of, Var};
use crate::decoder::GaussianVars;
use crate::error::Result;
use crate::geometry::CameraView;
use crate::tensor::{Real, Tensor};

use super::{render_backward, render_tiled};

const TILE: usize = 16;

/// Renders a view differentiably; columns 0..3 are RGB, column 3 is alpha.
pub fn render_images<'t, T: Real>(
    g: &GaussianVars<'t, T>,
    view: &CameraView,
    background: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let bg_t = background.value();
    if bg_t.shape() != [3] {
        return Err(crate::Error::shape(format!(
            "background shape {:?}, want [3]",
            bg_t.shape()
        )));
    }
    let bg = [
        bg_t.data()[0].to_f64(),
        bg_t.data()[1].to_f64(),
        bg_t.data()[2].to_f64(),
    ];
    let gs = g.snapshot();
    let out = render_tiled(&gs, view, bg, TILE)?;
    let n = view.width * view.height;
    let mut fused = Vec::with_capacity(n * 4);
    for p in 0..n {
        fused.extend_from_slice(&out.rgb.data()[p * 3..(p + 1) * 3]);
        fused.push(out.alpha.data()[p]);
    }
    let value = Tensor::from_vec(vec![n, 4], fused);

    let tape = tape_of(&[&g.mu, &g.scale, &g.color, &g.opacity, &g.rot, background]);
    if tape.is_none() {
        return Ok(Var::constant(value));
    }
    let nodes = [
        g.mu.node_id(),
        g.scale.node_id(),
        g.color.node_id(),
        g.opacity.node_id(),
        g.rot.node_id(),
        background.node_id(),
    ];
    let view = view.clone();
    let s_cols = if gs.disk { 2 } else { 3 };
    let k = gs.count();
    let back = move |dy: &[T], sink: &mut crate::autodiff::GradSink<T>| {
        let mut d_rgb = Vec::with_capacity(n * 3);
        let mut d_alpha = Vec::with_capacity(n);
        for p in 0..n {
            d_rgb.extend_from_slice(&dy[p * 4..p * 4 + 3]);
            d_alpha.push(dy[p * 4 + 3]);
        }
        let grads = render_backward(
            &gs,
            &view,
            bg,
            &Tensor::from_vec(vec![n, 3], d_rgb),
            &Tensor::from_vec(vec![n, 1], d_alpha),
        )
        .expect("saved forward state renders");
        let parts: [(&Tensor<T>, usize); 6] = [
            (&grads.mu, 0),
            (&grads.scale, 1),
            (&grads.color, 2),
            (&grads.opacity, 3),
            (&grads.rot, 4),
            (&grads.background, 5),
        ];
        let lens = [k * 3, k * s_cols, k * 3, k, k * 4, 3];
        for ((t, slot), len) in parts.into_iter().zip(lens) {
            if let Some(gbuf) = sink.slot(nodes[slot], len) {
                for (gi, &v) in gbuf.iter_mut().zip(t.data()) {
                    *gi += v;
                }
            }
        }
    };
    Ok(custom_op(tape, value, back))
}
