use std::fmt::Write as _;

use super::{Model, IMAGE_SIZE, WIDTHS};
use crate::nn::{SeBlock, Shortcut};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Relu,
    Add,
    Se,
    Bridge,
    Pool,
    FullyConnected,
}

impl LayerKind {
    fn label(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::BatchNorm => "bn",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::Se => "se",
            LayerKind::Bridge => "bridge",
            LayerKind::Pool => "pool",
            LayerKind::FullyConnected => "fc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    pub kind: LayerKind,
    /// Output shape for a single 3x32x32 image, batch dimension omitted.
    pub output: Vec<usize>,
    pub params: usize,
}

fn row(name: String, kind: LayerKind, output: Vec<usize>, params: usize) -> LayerRow {
    LayerRow {
        name,
        kind,
        output,
        params,
    }
}

impl<T: Scalar> Model<T> {
    /// Per-layer table in forward order.
    pub fn layer_table(&self) -> Vec<LayerRow> {
        let mut rows = Vec::new();
        let (mut h, mut w) = (IMAGE_SIZE, IMAGE_SIZE);
        let c0 = self.stem_conv.c_out;
        rows.push(row(
            "stem.conv".into(),
            LayerKind::Conv,
            vec![c0, h, w],
            self.stem_conv.param_count(),
        ));
        rows.push(row(
            "stem.bn".into(),
            LayerKind::BatchNorm,
            vec![c0, h, w],
            self.stem_bn.param_count(),
        ));
        let se_row = |name: String, se: &SeBlock, shape: Vec<usize>| LayerRow {
            name,
            kind: LayerKind::Se,
            output: shape,
            params: se.param_count(),
        };
        for block in &self.blocks {
            let (in_h, in_w) = (h, w);
            (h, w) = block.out_hw(h, w);
            let out = vec![block.c_out, h, w];
            let b = &block.name;
            rows.push(row(
                format!("{b}.conv1"),
                LayerKind::Conv,
                out.clone(),
                block.conv1.param_count(),
            ));
            rows.push(row(
                format!("{b}.bn1"),
                LayerKind::BatchNorm,
                out.clone(),
                block.bn1.param_count(),
            ));
            rows.push(row(
                format!("{b}.conv2"),
                LayerKind::Conv,
                out.clone(),
                block.conv2.param_count(),
            ));
            rows.push(row(
                format!("{b}.bn2"),
                LayerKind::BatchNorm,
                out.clone(),
                block.bn2.param_count(),
            ));
            if let Some(se) = &block.residual_se {
                rows.push(se_row(format!("{b}.residual_se"), se, out.clone()));
            }
            match &block.shortcut {
                Shortcut::Identity { se } => {
                    if let Some(se) = se {
                        rows.push(se_row(format!("{b}.skip_se"), se, vec![block.c_in, in_h, in_w]));
                    }
                    rows.push(LayerRow {
                        name: format!("{b}.add"),
                        kind: LayerKind::Add,
                        output: out.clone(),
                        params: 0,
                    });
                }
                Shortcut::Bridge(bridge) => {
                    rows.push(LayerRow {
                        name: format!("{b}.bridge"),
                        kind: LayerKind::Bridge,
                        output: out.clone(),
                        params: bridge.projection_param_count(),
                    });
                    if let Some(se) = &bridge.se {
                        let shape = if se.channels == block.c_in {
                            vec![block.c_in, in_h, in_w]
                        } else {
                            out.clone()
                        };
                        rows.push(se_row(format!("{b}.bridge.se"), se, shape));
                    }
                    rows.push(LayerRow {
                        name: format!("{b}.add"),
                        kind: LayerKind::Add,
                        output: out.clone(),
                        params: 0,
                    });
                }
                Shortcut::Absent => {}
            }
            rows.push(LayerRow {
                name: format!("{b}.relu"),
                kind: LayerKind::Relu,
                output: out,
                params: 0,
            });
        }
        rows.push(LayerRow {
            name: "head.pool".into(),
            kind: LayerKind::Pool,
            output: vec![WIDTHS[2]],
            params: 0,
        });
        rows.push(LayerRow {
            name: "fc".into(),
            kind: LayerKind::FullyConnected,
            output: vec![self.fc.d_out],
            params: self.fc.param_count(),
        });
        rows
    }

    /// Printable per-layer table with a totals line.
    pub fn summary(&self) -> String {
        let rows = self.layer_table();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} (classes {}, r {})",
            self.config.label(),
            self.config.num_classes,
            self.config.reduction
        );
        let _ = writeln!(
            s,
            "{:<32} {:<7} {:<14} {:>10}",
            "layer", "kind", "output", "params"
        );
        for r in &rows {
            let shape = r
                .output
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x");
            let _ = writeln!(
                s,
                "{:<32} {:<7} {:<14} {:>10}",
                r.name,
                r.kind.label(),
                shape,
                r.params
            );
        }
        let total: usize = rows.iter().map(|r| r.params).sum();
        let _ = writeln!(
            s,
            "total trainable parameters: {total} ({} bridge, {} se)",
            rows.iter().filter(|r| r.kind == LayerKind::Bridge).count(),
            rows.iter().filter(|r| r.kind == LayerKind::Se).count()
        );
        s
    }
}
