//! Trainable-parameter and FLOP accounting.
//!
//! Conventions: a multiply-accumulate is 2 FLOPs and bias adds are counted;
//! max-pool costs 3 comparisons per output, ReLU 1 per element, an n-ary add
//! `n − 1` per element, softmax `4·C` per pixel; upsample, concat and crop
//! are free. Costs are per image (N = 1).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{infer_shapes, ArchitectureSpec, LayerKind};
use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub node: String,
    pub kind: String,
    pub out_shape: Vec<usize>,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub arch: String,
    pub input_shape: Vec<usize>,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

/// `Kh·Kw·Cin·Cout + Cout` for conv and transposed conv, 0 otherwise.
pub fn layer_params(kind: &LayerKind) -> u64 {
    kind.param_shapes().map_or(0, |(w, b)| (w.iter().product::<usize>() + b[0]) as u64)
}

/// Trainable parameters of the whole graph.
pub fn count_params(spec: &ArchitectureSpec) -> u64 {
    spec.nodes().iter().map(|n| layer_params(&n.kind)).sum()
}

fn layer_flops(kind: &LayerKind, inputs: &[&Shape], out: &Shape) -> u64 {
    let d = out.dims();
    let (c, h, w) = (d[1] as u64, d[2] as u64, d[3] as u64);
    let elements = c * h * w;
    match *kind {
        LayerKind::Conv { in_channels, kernel, .. } => {
            let k = (kernel * kernel * in_channels) as u64;
            2 * k * elements + elements
        }
        // Each input pixel meets each 2×2 kernel tap exactly once.
        LayerKind::TransposedConv { in_channels, .. } => 2 * in_channels as u64 * elements + elements,
        LayerKind::MaxPool2x2 => 3 * elements,
        LayerKind::Relu => elements,
        LayerKind::Add => (inputs.len() as u64 - 1) * elements,
        LayerKind::Softmax => 4 * c * h * w,
        LayerKind::Input { .. } | LayerKind::Concat | LayerKind::Crop | LayerKind::UpsampleNearest2x => 0,
    }
}

/// Per-node costs at `(1, C, H, W)`; the input node is not listed.
pub fn count_flops(spec: &ArchitectureSpec, height: usize, width: usize) -> Result<CostReport> {
    let input_shape = vec![1, spec.input_channels(), height, width];
    let shapes = infer_shapes(spec, &input_shape)?;
    let mut rows = Vec::new();
    for (i, node) in spec.nodes().iter().enumerate() {
        if matches!(node.kind, LayerKind::Input { .. }) {
            continue;
        }
        let ins: Vec<&Shape> = node.inputs.iter().map(|&j| &shapes[j]).collect();
        rows.push(CostRow {
            node: node.name.clone(),
            kind: node.kind.name().to_string(),
            out_shape: shapes[i].dims().to_vec(),
            params: layer_params(&node.kind),
            flops: layer_flops(&node.kind, &ins, &shapes[i]),
        });
    }
    Ok(CostReport::from_rows(spec.id(), input_shape, rows))
}

fn shape_str(dims: &[usize]) -> String {
    dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

impl CostReport {
    pub fn from_rows(arch: &str, input_shape: Vec<usize>, rows: Vec<CostRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_flops = rows.iter().map(|r| r.flops).sum();
        CostReport { arch: arch.to_string(), input_shape, rows, total_params, total_flops }
    }

    pub fn row(&self, node: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.node == node)
    }

    /// Header, one row per node, then `TOTAL`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("node\tkind\tout_shape\tparams\tflops\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.node, r.kind, shape_str(&r.out_shape), r.params, r.flops);
        }
        let _ = writeln!(s, "TOTAL\t-\t{}\t{}\t{}", shape_str(&self.input_shape), self.total_params, self.total_flops);
        s
    }

    /// Parses [`to_tsv`](Self::to_tsv) output and checks the totals row.
    pub fn from_tsv(arch: &str, text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::format(format!("cost TSV line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "node\tkind\tout_shape\tparams\tflops")) => {}
            _ => return Err(Error::format("cost TSV header missing")),
        }
        let parse_shape = |s: &str, i| -> Result<Vec<usize>> {
            s.split('x').map(|d| d.parse().map_err(|_| bad(i, "bad shape"))).collect()
        };
        let mut rows = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(i, "expected 5 fields"));
            }
            let params = f[3].parse().map_err(|_| bad(i, "bad params"))?;
            let flops = f[4].parse().map_err(|_| bad(i, "bad flops"))?;
            if f[0] == "TOTAL" {
                let report = CostReport::from_rows(arch, parse_shape(f[2], i)?, rows);
                if (report.total_params, report.total_flops) != (params, flops) {
                    return Err(bad(i, "totals do not equal the column sums"));
                }
                return Ok(report);
            }
            rows.push(CostRow {
                node: f[0].to_string(),
                kind: f[1].to_string(),
                out_shape: parse_shape(f[2], i)?,
                params,
                flops,
            });
        }
        Err(Error::format("cost TSV has no TOTAL row"))
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{} @ {} (per image; MAC = 2 FLOPs, bias adds included)\n",
            self.arch,
            shape_str(&self.input_shape)
        );
        let _ = writeln!(s, "{:<16} {:<16} {:<16} {:>10} {:>15}", "node", "kind", "out_shape", "params", "flops");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:<16} {:<16} {:>10} {:>15}",
                r.node,
                r.kind,
                shape_str(&r.out_shape),
                r.params,
                r.flops
            );
        }
        let _ = writeln!(s, "{:<50} {:>10} {:>15}", "TOTAL", self.total_params, self.total_flops);
        let _ = writeln!(
            s,
            "= {:.3} M params, {:.3} GFLOPs",
            self.total_params as f64 / 1e6,
            self.total_flops as f64 / 1e9
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_by_id, build_rfbsnet_desk, init_params, GraphBuilder, DESK_TCONV_HEAD_ARCH_ID};

    #[test]
    fn hand_counted_layers() {
        let spec = build_rfbsnet_desk(1, 2).unwrap();
        let r = count_flops(&spec, 256, 256).unwrap();
        assert_eq!(r.row("down.conv").unwrap().params, 9 * 15 + 15);
        let head = r.row("head.conv").unwrap();
        assert_eq!(head.params, 16 * 2 + 2);
        assert_eq!(head.flops, 2 * 16 * 2 * 65_536 + 2 * 65_536);
        assert_eq!(head.flops, 4_325_376);
        assert_eq!(r.row("down.pool").unwrap().flops, 3 * 128 * 128);
        assert_eq!(r.row("down.concat").unwrap().params, 0);
        assert_eq!(r.row("down.concat").unwrap().flops, 0);
        // three operands, 16×128×128 each
        assert_eq!(r.row("fuse.add").unwrap().flops, 2 * 16 * 128 * 128);
        assert_eq!(r.row("head.softmax").unwrap().flops, 4 * 2 * 65_536);
    }

    #[test]
    fn params_match_initialised_store() {
        for id in [crate::model::DESK_ARCH_ID, DESK_TCONV_HEAD_ARCH_ID] {
            let spec = build_by_id(id).unwrap();
            let store = init_params::<f32>(&spec, 0);
            assert_eq!(count_params(&spec), store.total_elements() as u64);
            assert_eq!(count_flops(&spec, 64, 64).unwrap().total_params, count_params(&spec));
        }
    }

    #[test]
    fn flops_scale_with_area() {
        let spec = build_rfbsnet_desk(1, 2).unwrap();
        let a = count_flops(&spec, 64, 64).unwrap();
        let b = count_flops(&spec, 128, 128).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(4 * x.flops, y.flops, "{}", x.node);
        }
        assert_eq!(a.total_flops, a.rows.iter().map(|r| r.flops).sum::<u64>());
    }

    #[test]
    fn tsv_roundtrip_and_degenerate_graph() {
        let spec = build_rfbsnet_desk(1, 2).unwrap();
        let r = count_flops(&spec, 256, 256).unwrap();
        assert_eq!(CostReport::from_tsv(spec.id(), &r.to_tsv()).unwrap(), r);
        assert!(CostReport::from_tsv("x", &r.to_tsv().replace("TOTAL\t-", "TOTAL\t-\t")).is_err());

        let mut g = GraphBuilder::new();
        let x = g.input(1);
        let empty = g.finish("identity", x, 1).unwrap();
        let r = count_flops(&empty, 8, 8).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.to_tsv(), "node\tkind\tout_shape\tparams\tflops\nTOTAL\t-\t1x1x8x8\t0\t0\n");
    }
}
