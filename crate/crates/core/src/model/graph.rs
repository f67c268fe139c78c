use std::collections::HashSet;

use rand::SeedableRng;

use super::config::{Architecture, EmaPlacement, VariantConfig};
use crate::blocks::{
    fuse_rgb_ir, Block, C2f, C3Ghost, ConvBnAct, DetectHead, Ema, GhostConv, InitRng, Param, ParamVisitor,
    ParamVisitorMut, Sppf,
};
use crate::tensor::{Shape, Tape, Tensor, Var};
use crate::{Error, Result};

/// Strides of the three pyramid levels consumed by the head.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// One layer of the graph.
#[derive(Clone, Debug)]
pub enum Layer {
    Conv(ConvBnAct),
    Ghost(GhostConv),
    C3Ghost(C3Ghost),
    C2f(C2f),
    Ema(Ema),
    Sppf(Sppf),
    Upsample(usize),
    Concat,
    Detect(DetectHead),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "Conv",
            Layer::Ghost(_) => "GhostConv",
            Layer::C3Ghost(_) => "C3Ghost",
            Layer::C2f(_) => "C2f",
            Layer::Ema(_) => "EMA",
            Layer::Sppf(_) => "SPPF",
            Layer::Upsample(_) => "Upsample",
            Layer::Concat => "Concat",
            Layer::Detect(_) => "Detect",
        }
    }

    fn block(&self) -> Option<&dyn Block> {
        Some(match self {
            Layer::Conv(b) => b,
            Layer::Ghost(b) => b,
            Layer::C3Ghost(b) => b,
            Layer::C2f(b) => b,
            Layer::Ema(b) => b,
            Layer::Sppf(b) => b,
            _ => return None,
        })
    }

    fn block_mut(&mut self) -> Option<&mut dyn Block> {
        Some(match self {
            Layer::Conv(b) => b,
            Layer::Ghost(b) => b,
            Layer::C3Ghost(b) => b,
            Layer::C2f(b) => b,
            Layer::Ema(b) => b,
            Layer::Sppf(b) => b,
            _ => return None,
        })
    }

    fn forward(&self, tape: &mut Tape, inputs: &[&Var]) -> Result<Vec<Var>> {
        if let Some(b) = self.block() {
            return Ok(vec![b.forward(tape, inputs[0])?]);
        }
        match self {
            Layer::Upsample(s) => Ok(vec![tape.upsample_nearest(inputs[0], *s)?]),
            Layer::Concat => Ok(vec![tape.concat(inputs, 1)?]),
            Layer::Detect(h) => {
                let v: Vec<Var> = inputs.iter().map(|&v| v.clone()).collect();
                h.forward(tape, &v)
            }
            _ => unreachable!("block layers handled above"),
        }
    }

    /// Output shapes, learnable parameters and MACs.
    fn cost(&self, inputs: &[Shape]) -> Result<(Vec<Shape>, u64, u64)> {
        if let Some(b) = self.block() {
            let c = b.cost(inputs[0])?;
            return Ok((vec![c.out], c.params, c.macs));
        }
        match self {
            Layer::Upsample(s) => {
                let [n, c, h, w] = inputs[0];
                Ok((vec![[n, c, h * s, w * s]], 0, 0))
            }
            Layer::Concat => {
                let mut out = inputs[0];
                for s in &inputs[1..] {
                    if s[0] != out[0] || s[2] != out[2] || s[3] != out[3] {
                        return Err(Error::shape("concat", format!("{:?} vs {s:?}", inputs[0])));
                    }
                    out[1] += s[1];
                }
                Ok((vec![out], 0, 0))
            }
            Layer::Detect(h) => {
                let costs = h.cost(inputs)?;
                Ok((
                    costs.iter().map(|c| c.out).collect(),
                    costs.iter().map(|c| c.params).sum(),
                    costs.iter().map(|c| c.macs).sum(),
                ))
            }
            _ => unreachable!("block layers handled above"),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        match self {
            Layer::Detect(h) => h.visit(prefix, f),
            other => {
                if let Some(b) = other.block() {
                    b.visit(prefix, f);
                }
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        match self {
            Layer::Detect(h) => h.visit_mut(prefix, f),
            other => {
                if let Some(b) = other.block_mut() {
                    b.visit_mut(prefix, f);
                }
            }
        }
    }
}

/// A node consumes the first output of each listed producer (or the graph
/// input for the first node).
#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub from: Vec<usize>,
    pub layer: Layer,
}

/// Per-node accounting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kind: &'static str,
    pub inputs: Vec<Shape>,
    pub outputs: Vec<Shape>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct LayerGraph {
    pub cfg: VariantConfig,
    nodes: Vec<Node>,
    /// Nodes whose outputs feed the head at strides 8/16/32.
    pyramid: [usize; 3],
    /// Index of the last backbone node (SPPF or its attention).
    backbone_end: usize,
}

struct Builder<'a> {
    nodes: Vec<Node>,
    rng: &'a mut InitRng,
}

impl Builder<'_> {
    fn push(&mut self, from: Vec<usize>, layer: Layer) -> usize {
        let i = self.nodes.len();
        self.nodes.push(Node {
            name: format!("model.{i}"),
            from,
            layer,
        });
        i
    }

    /// Append after the previous node.
    fn then(&mut self, layer: Layer) -> usize {
        let prev = self.nodes.len().checked_sub(1).map(|p| vec![p]).unwrap_or_default();
        self.push(prev, layer)
    }
}

/// Build the graph for `cfg` with weights drawn from a seeded generator.
pub fn build_model(cfg: &VariantConfig, seed: u64) -> Result<LayerGraph> {
    cfg.validate()?;
    let mut rng = InitRng::seed_from_u64(seed);
    let mut b = Builder {
        nodes: Vec::new(),
        rng: &mut rng,
    };
    let (pyramid, backbone_end) = match cfg.architecture {
        Architecture::Egd => build_egd(cfg, &mut b)?,
        Architecture::Baseline => build_baseline(cfg, &mut b)?,
    };
    let head_in = pyramid.map(|i| node_channels(&b.nodes, i, cfg));
    let head = DetectHead::new(cfg.head, head_in, cfg.num_classes, cfg.reg_max, STRIDES, b.rng)?;
    b.push(pyramid.to_vec(), Layer::Detect(head));
    let mut graph = LayerGraph {
        cfg: cfg.clone(),
        nodes: b.nodes,
        pyramid,
        backbone_end,
    };
    graph.check_unique_names()?;
    // initial values must survive the single-precision weight file exactly
    let mut status = Ok(());
    graph.visit_mut(&mut |_, p| {
        if status.is_ok() {
            let data = p.tensor().data().iter().map(|&v| v as f32 as f64).collect();
            status = p.set_data(data);
        }
    });
    status?;
    Ok(graph)
}

/// Output channels of node `i` from a symbolic shape pass.
fn node_channels(nodes: &[Node], i: usize, cfg: &VariantConfig) -> usize {
    let shapes = shape_pass(nodes, [1, cfg.in_channels, 64, 64]).expect("graph built consistently");
    shapes[i][0][1]
}

fn shape_pass(nodes: &[Node], input: Shape) -> Result<Vec<Vec<Shape>>> {
    let mut outs: Vec<Vec<Shape>> = Vec::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        let ins: Vec<Shape> = if i == 0 {
            vec![input]
        } else {
            n.from.iter().map(|&j| outs[j][0]).collect()
        };
        let (o, _, _) = n.layer.cost(&ins).map_err(|e| with_layer(n, e))?;
        outs.push(o);
    }
    Ok(outs)
}

fn with_layer(n: &Node, e: Error) -> Error {
    match e {
        Error::Shape { op, detail } => Error::Shape {
            op,
            detail: format!("at {} ({}): {detail}", n.name, n.layer.kind()),
        },
        other => other,
    }
}

fn build_egd(cfg: &VariantConfig, b: &mut Builder<'_>) -> Result<([usize; 3], usize)> {
    let [w0, w1, w2, w3, w4] = cfg.widths();
    let reps = cfg.backbone_repeats();
    let nr = cfg.neck_repeats();
    let g = cfg.ema_factor;

    let ghost = |b: &mut Builder<'_>, c1, c2| -> Result<usize> {
        let l = Layer::Ghost(GhostConv::new(c1, c2, 3, 2, true, b.rng)?);
        Ok(b.then(l))
    };
    // C3Ghost with its attention; `from` feeds whichever comes first
    let csp = |b: &mut Builder<'_>, from: usize, c1, c2, n, shortcut| -> Result<usize> {
        let c3 = Layer::C3Ghost(C3Ghost::new(c1, c2, n, shortcut, b.rng)?);
        match cfg.ema_placement {
            EmaPlacement::AfterC3Ghost => {
                b.push(vec![from], c3);
                let e = Layer::Ema(Ema::new(c2, g, b.rng)?);
                Ok(b.then(e))
            }
            EmaPlacement::BeforeC3Ghost => {
                let e = Layer::Ema(Ema::new(c1, g, b.rng)?);
                b.push(vec![from], e);
                Ok(b.then(c3))
            }
        }
    };
    let stem = GhostConv::new(cfg.in_channels, w0, 3, 2, true, b.rng)?;
    b.push(vec![], Layer::Ghost(stem));
    let d = ghost(b, w0, w1)?;
    csp(b, d, w1, w1, reps[0], true)?;
    let d = ghost(b, w1, w2)?;
    let p3 = csp(b, d, w2, w2, reps[1], true)?;
    let d = ghost(b, w2, w3)?;
    let p4 = csp(b, d, w3, w3, reps[2], true)?;
    let d = ghost(b, w3, w4)?;
    csp(b, d, w4, w4, reps[3], true)?;
    let s = Layer::Sppf(Sppf::new(w4, w4, 5, b.rng)?);
    b.then(s);
    let e = Layer::Ema(Ema::new(w4, g, b.rng)?);
    let p5 = b.then(e);

    let up = b.then(Layer::Upsample(2));
    let cat = b.push(vec![up, p4], Layer::Concat);
    let n4 = csp(b, cat, w4 + w3, w3, nr, false)?;
    let up = b.then(Layer::Upsample(2));
    let cat = b.push(vec![up, p3], Layer::Concat);
    let out3 = csp(b, cat, w3 + w2, w2, nr, false)?;
    let d = ghost(b, w2, w2)?;
    let cat = b.push(vec![d, n4], Layer::Concat);
    let out4 = csp(b, cat, w2 + w3, w3, nr, false)?;
    let d = ghost(b, w3, w3)?;
    let cat = b.push(vec![d, p5], Layer::Concat);
    let out5 = csp(b, cat, w3 + w4, w4, nr, false)?;
    Ok(([out3, out4, out5], p5))
}

fn build_baseline(cfg: &VariantConfig, b: &mut Builder<'_>) -> Result<([usize; 3], usize)> {
    let [w0, w1, w2, w3, w4] = cfg.widths();
    let reps = cfg.backbone_repeats();
    let nr = cfg.neck_repeats();

    let conv = |b: &mut Builder<'_>, c1, c2| -> Result<usize> {
        let l = Layer::Conv(ConvBnAct::new(c1, c2, 3, 2, b.rng)?);
        Ok(b.then(l))
    };
    let c2f = |b: &mut Builder<'_>, from: usize, c1, c2, n, shortcut| -> Result<usize> {
        let l = Layer::C2f(C2f::new(c1, c2, n, shortcut, b.rng)?);
        Ok(b.push(vec![from], l))
    };
    let stem = ConvBnAct::new(cfg.in_channels, w0, 3, 2, b.rng)?;
    b.push(vec![], Layer::Conv(stem));
    let d = conv(b, w0, w1)?;
    c2f(b, d, w1, w1, reps[0], true)?;
    let d = conv(b, w1, w2)?;
    let p3 = c2f(b, d, w2, w2, reps[1], true)?;
    let d = conv(b, w2, w3)?;
    let p4 = c2f(b, d, w3, w3, reps[2], true)?;
    let d = conv(b, w3, w4)?;
    c2f(b, d, w4, w4, reps[3], true)?;
    let s = Layer::Sppf(Sppf::new(w4, w4, 5, b.rng)?);
    let p5 = b.then(s);

    let up = b.then(Layer::Upsample(2));
    let cat = b.push(vec![up, p4], Layer::Concat);
    let n4 = c2f(b, cat, w4 + w3, w3, nr, false)?;
    let up = b.then(Layer::Upsample(2));
    let cat = b.push(vec![up, p3], Layer::Concat);
    let out3 = c2f(b, cat, w3 + w2, w2, nr, false)?;
    let d = conv(b, w2, w2)?;
    let cat = b.push(vec![d, n4], Layer::Concat);
    let out4 = c2f(b, cat, w2 + w3, w3, nr, false)?;
    let d = conv(b, w3, w3)?;
    let cat = b.push(vec![d, p5], Layer::Concat);
    let out5 = c2f(b, cat, w3 + w4, w4, nr, false)?;
    Ok(([out3, out4, out5], p5))
}

impl LayerGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn pyramid(&self) -> [usize; 3] {
        self.pyramid
    }

    pub fn backbone_end(&self) -> usize {
        self.backbone_end
    }

    pub fn head(&self) -> &DetectHead {
        match &self.nodes.last().expect("graph has a head").layer {
            Layer::Detect(h) => h,
            _ => unreachable!("last node is the head"),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cfg.in_channels
    }

    /// Raw per-scale maps `[N, 4 * reg_max + classes, H / s, W / s]`.
    pub fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Vec<Var>> {
        let [_, c, h, w] = x.shape();
        if c != self.cfg.in_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "at {} ({}): {} graph expects {} input channels, got {c}",
                    self.nodes[0].name,
                    self.nodes[0].layer.kind(),
                    self.cfg.modality,
                    self.cfg.in_channels
                ),
            ));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "forward",
                format!("input spatial size {h}x{w} must be a positive multiple of 32"),
            ));
        }
        let mut outs: Vec<Vec<Var>> = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            let ins: Vec<&Var> = if i == 0 {
                vec![x]
            } else {
                n.from.iter().map(|&j| &outs[j][0]).collect()
            };
            let o = n.layer.forward(tape, &ins).map_err(|e| with_layer(n, e))?;
            outs.push(o);
        }
        Ok(outs.pop().expect("non-empty graph"))
    }

    /// Inference forward on an owned tensor.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        Ok(self
            .forward(&mut tape, &v)?
            .into_iter()
            .map(Var::into_tensor)
            .collect())
    }

    /// Early-fusion forward from separate RGB and IR tensors.
    pub fn predict_pair(&self, rgb: &Tensor, ir: &Tensor) -> Result<Vec<Tensor>> {
        if self.cfg.in_channels != 4 {
            return Err(Error::Config(format!(
                "{} graph takes a single input, not an RGB/IR pair",
                self.cfg.modality
            )));
        }
        let mut tape = Tape::inference();
        let (r, i) = (tape.constant(rgb.clone()), tape.constant(ir.clone()));
        let x = fuse_rgb_ir(&mut tape, &r, &i)?;
        Ok(self
            .forward(&mut tape, &x)?
            .into_iter()
            .map(Var::into_tensor)
            .collect())
    }

    /// Closed-form accounting of every node for one input shape.
    pub fn cost_rows(&self, input: Shape) -> Result<Vec<CostRow>> {
        let mut outs: Vec<Vec<Shape>> = Vec::with_capacity(self.nodes.len());
        let mut rows = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            let ins: Vec<Shape> = if i == 0 {
                vec![input]
            } else {
                n.from.iter().map(|&j| outs[j][0]).collect()
            };
            if i == 0 && input[1] != self.cfg.in_channels {
                return Err(Error::shape(
                    "cost",
                    format!("at {}: expects {} input channels, got {input:?}", n.name, self.cfg.in_channels),
                ));
            }
            let (o, params, macs) = n.layer.cost(&ins).map_err(|e| with_layer(n, e))?;
            rows.push(CostRow {
                name: n.name.clone(),
                kind: n.layer.kind(),
                inputs: ins,
                outputs: o.clone(),
                params,
                macs,
            });
            outs.push(o);
        }
        Ok(rows)
    }

    pub fn visit(&self, f: &mut ParamVisitor<'_>) {
        for n in &self.nodes {
            n.layer.visit(&n.name, f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        for n in &mut self.nodes {
            n.layer.visit_mut(&n.name, f);
        }
    }

    /// Every stored tensor in file order.
    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.visit(&mut |name, p| out.push((name.to_string(), p.clone())));
        out
    }

    /// Learnable parameters of node `i` found by walking its tensors.
    pub fn enumerate_node_params(&self, i: usize) -> u64 {
        let mut total = 0;
        self.nodes[i].layer.visit("", &mut |_, p| {
            if p.learnable() {
                total += p.numel() as u64;
            }
        });
        total
    }

    fn check_unique_names(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, _) in self.named_params() {
            if !seen.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate parameter name {name}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Modality;

    #[test]
    fn egd_layout_and_taps() {
        let g = build_model(&VariantConfig::egd(Modality::Fusion), 0).unwrap();
        assert_eq!(g.nodes().len(), 32);
        assert_eq!(g.pyramid(), [22, 26, 30]);
        assert_eq!(g.backbone_end(), 14);
        let rows = g.cost_rows([1, 4, 640, 640]).unwrap();
        assert_eq!(rows[0].inputs[0][1], 4);
        let taps: Vec<[usize; 2]> = g.pyramid().iter().map(|&i| [rows[i].outputs[0][2], rows[i].outputs[0][3]]).collect();
        assert_eq!(taps, vec![[80, 80], [40, 40], [20, 20]]);
        let head = rows.last().unwrap();
        assert!(head.outputs.iter().all(|s| s[1] == 66));
        g.check_unique_names().unwrap();
    }

    #[test]
    fn baseline_layout() {
        let g = build_model(&VariantConfig::baseline(Modality::Rgb), 0).unwrap();
        assert_eq!(g.nodes().len(), 23);
        assert_eq!(g.pyramid(), [15, 18, 21]);
        assert!(g.nodes().iter().all(|n| !matches!(n.layer, Layer::Ema(_) | Layer::Ghost(_))));
    }

    #[test]
    fn ema_before_placement_swaps_order() {
        let mut cfg = VariantConfig::egd(Modality::Rgb);
        cfg.ema_placement = EmaPlacement::BeforeC3Ghost;
        let g = build_model(&cfg, 0).unwrap();
        assert_eq!(g.nodes()[2].layer.kind(), "EMA");
        assert_eq!(g.nodes()[3].layer.kind(), "C3Ghost");
        let rows = g.cost_rows([1, 3, 64, 64]).unwrap();
        assert_eq!(rows.last().unwrap().outputs.len(), 3);
    }

    #[test]
    fn forward_rejects_wrong_channels_naming_layer() {
        let g = build_model(&VariantConfig::egd(Modality::Ir), 0).unwrap();
        let err = g.predict(&Tensor::zeros([1, 3, 64, 64])).unwrap_err();
        assert!(err.to_string().contains("model.0"), "{err}");
    }
}
