//! Batch-level diagnostics record assembled from model traces.

use serde::{Deserialize, Serialize};

use super::{
    attention_distance, cluster_edge_stats, feature_similarity_variance, fourier_log_amplitude, mask_token_variance,
    nmi_attention, relation_kld, similarity_matrix, FourierCurve, RelationMatrix, Setting,
};
use crate::error::{invalid, Error, Result};
use crate::exploitation::{decoder_provenance, overall_rates};
use crate::model::{ForwardTrace, LayerTrace, Mae, MaskSpec};
use crate::numerics::{FeatureGrid, Matrix};
use crate::partition::{ncut_bipartition, NegativeWeights, SimilarityGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Encoder,
    Decoder,
}

impl Part {
    fn as_str(self) -> &'static str {
        match self {
            Part::Encoder => "encoder",
            Part::Decoder => "decoder",
        }
    }
}

/// Image-averaged metrics of one layer. Relation metrics use the intact
/// input; mask-token variance and exploitation use the supplied masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub part: Part,
    pub layer: usize,
    pub sigma_f: f64,
    pub sigma_s: f64,
    pub nmi: f64,
    pub attention_distance: f64,
    pub kld_attention: Option<f64>,
    pub kld_cosine: Option<f64>,
    pub mu_intra_attention: Option<f64>,
    pub mu_inter_attention: Option<f64>,
    pub mu_intra_cosine: Option<f64>,
    pub mu_inter_cosine: Option<f64>,
    pub fourier: FourierCurve,
    pub mask_token_variance: Option<f64>,
    /// `(R_{V->O}, R_{M->O})` accumulated through this decoder layer.
    pub exploitation: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub images: usize,
    /// Images whose final-layer similarity graph could not be partitioned.
    pub partition_failures: usize,
    pub layers: Vec<LayerDiagnostics>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticsOptions {
    pub negative_weights: NegativeWeights,
}

#[derive(Default, Clone)]
struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

#[derive(Default, Clone)]
struct Acc {
    sigma_f: Mean,
    sigma_s: Mean,
    nmi: Mean,
    distance: Mean,
    kld_a: Mean,
    kld_c: Mean,
    intra_a: Mean,
    inter_a: Mean,
    intra_c: Mean,
    inter_c: Mean,
    fourier: Vec<Mean>,
    frequency: Vec<f64>,
    mtv: Mean,
    r_v: Mean,
    r_m: Mean,
}

fn relations(layer: &LayerTrace, index: usize, setting: Setting) -> Result<(RelationMatrix, RelationMatrix)> {
    let a = RelationMatrix::from_heads(&layer.attention, index, setting)?;
    let mut c = similarity_matrix(&layer.output)?;
    c.layer = index;
    c.setting = setting;
    Ok((a, c))
}

struct Context<'a> {
    grid: usize,
    patch: usize,
    positions: &'a [(usize, usize)],
    split: Option<(Vec<usize>, Vec<usize>)>,
}

fn accumulate_layer(
    acc: &mut Acc,
    ctx: &Context<'_>,
    layer: &LayerTrace,
    reference: Option<&LayerTrace>,
    index: usize,
    setting: Setting,
) -> Result<()> {
    let (a, c) = relations(layer, index, setting)?;
    let (sf, ss) = feature_similarity_variance(&layer.output)?;
    acc.sigma_f.push(sf);
    acc.sigma_s.push(ss);
    acc.nmi.push(nmi_attention(&a)?);
    acc.distance.push(attention_distance(&a, ctx.positions, ctx.patch)?);
    if let Some(r) = reference {
        let (ra, rc) = relations(r, index, setting)?;
        acc.kld_a.push(relation_kld(&a, &ra)?);
        acc.kld_c.push(relation_kld(&c, &rc)?);
    }
    if let Some((x, y)) = &ctx.split {
        if let Ok((intra, inter)) = cluster_edge_stats(&a, x, y) {
            acc.intra_a.push(intra);
            acc.inter_a.push(inter);
        }
        if let Ok((intra, inter)) = cluster_edge_stats(&c, x, y) {
            acc.intra_c.push(intra);
            acc.inter_c.push(inter);
        }
    }
    let curve = fourier_log_amplitude(&FeatureGrid::from_tokens(&layer.output, ctx.grid, ctx.grid)?)?;
    if acc.fourier.is_empty() {
        acc.fourier = vec![Mean::default(); curve.delta_log_amplitude.len()];
        acc.frequency = curve.frequency.clone();
    }
    for (m, v) in acc.fourier.iter_mut().zip(&curve.delta_log_amplitude) {
        m.push(*v);
    }
    Ok(())
}

/// Diagnostics of `model` over images given as raw patch rows. `masks`
/// drive the masked-decoder metrics; `reference` (typically the final
/// checkpoint) enables the KL columns.
pub fn compute_diagnostics(
    model: &Mae<f32>,
    patches: &[Matrix<f32>],
    masks: &[MaskSpec],
    reference: Option<&Mae<f32>>,
    options: DiagnosticsOptions,
) -> Result<DiagnosticsRecord> {
    if patches.is_empty() || patches.len() != masks.len() {
        return Err(invalid(format!("{} images but {} masks", patches.len(), masks.len())));
    }
    let cfg = model.config();
    if let Some(r) = reference {
        if r.config() != cfg {
            return Err(invalid("reference model has a different configuration"));
        }
    }
    let n = cfg.num_tokens();
    let positions = cfg.positions();
    let mut enc_acc = vec![Acc::default(); cfg.encoder_layers];
    let mut dec_acc = vec![Acc::default(); cfg.decoder_layers];
    let mut failures = 0;
    let intact = MaskSpec::unmasked(n);
    for (chunk_p, chunk_m) in patches.chunks(32).zip(masks.chunks(32)) {
        let refs: Vec<&Matrix<f32>> = chunk_p.iter().collect();
        let intact_masks: Vec<&MaskSpec> = chunk_p.iter().map(|_| &intact).collect();
        let traces = model.trace_batch(&refs, &intact_masks)?;
        let ref_traces: Option<Vec<ForwardTrace>> =
            reference.map(|r| r.trace_batch(&refs, &intact_masks)).transpose()?;
        let masked: Vec<&MaskSpec> = chunk_m.iter().collect();
        let masked_traces = model.trace_batch(&refs, &masked)?;
        for (b, t) in traces.iter().enumerate() {
            let last = t.encoder.layers.last().expect("at least one encoder layer");
            let split = match similarity_matrix(&last.output)
                .and_then(|m| SimilarityGraph::from_similarity(&m, options.negative_weights))
                .and_then(|g| ncut_bipartition(&g))
            {
                Ok(p) => Some((p.cluster_a, p.cluster_b)),
                Err(Error::DegenerateGraph(_)) | Err(Error::Eigen(_)) => {
                    failures += 1;
                    None
                }
                Err(e) => return Err(e),
            };
            let ctx = Context {
                grid: cfg.grid(),
                patch: cfg.patch_size,
                positions: &positions,
                split,
            };
            let rt = ref_traces.as_ref().map(|r| &r[b]);
            for (l, layer) in t.encoder.layers.iter().enumerate() {
                let r = rt.map(|r| &r.encoder.layers[l]);
                accumulate_layer(&mut enc_acc[l], &ctx, layer, r, l, Setting::IntactEncoder)?;
            }
            let dec = t.decoder.as_ref().expect("decoder trace");
            for (l, layer) in dec.layers.iter().enumerate() {
                let r = rt.map(|r| &r.decoder.as_ref().expect("decoder trace").layers[l]);
                accumulate_layer(&mut dec_acc[l], &ctx, layer, r, l, Setting::IntactDecoder)?;
            }
            let mt = &masked_traces[b];
            let mdec = mt.decoder.as_ref().expect("decoder trace");
            if mt.mask.masked().len() >= 2 {
                for (l, v) in mask_token_variance(mdec, &mt.mask)?.into_iter().enumerate() {
                    dec_acc[l].mtv.push(v);
                }
            }
            if !mt.mask.masked().is_empty() {
                for (l, s) in decoder_provenance(mdec, &mt.mask)?.iter().enumerate() {
                    let (v, m) = overall_rates(s, mt.mask.ratio());
                    dec_acc[l].r_v.push(v);
                    dec_acc[l].r_m.push(m);
                }
            }
        }
    }
    let finish = |part: Part, layer: usize, a: &Acc| LayerDiagnostics {
        part,
        layer,
        sigma_f: a.sigma_f.get().unwrap_or(0.0),
        sigma_s: a.sigma_s.get().unwrap_or(0.0),
        nmi: a.nmi.get().unwrap_or(0.0),
        attention_distance: a.distance.get().unwrap_or(0.0),
        kld_attention: a.kld_a.get(),
        kld_cosine: a.kld_c.get(),
        mu_intra_attention: a.intra_a.get(),
        mu_inter_attention: a.inter_a.get(),
        mu_intra_cosine: a.intra_c.get(),
        mu_inter_cosine: a.inter_c.get(),
        fourier: FourierCurve {
            frequency: a.frequency.clone(),
            delta_log_amplitude: a.fourier.iter().map(|m| m.get().unwrap_or(0.0)).collect(),
        },
        mask_token_variance: a.mtv.get(),
        exploitation: a.r_v.get().zip(a.r_m.get()),
    };
    let mut layers: Vec<LayerDiagnostics> = enc_acc
        .iter()
        .enumerate()
        .map(|(l, a)| finish(Part::Encoder, l, a))
        .collect();
    layers.extend(dec_acc.iter().enumerate().map(|(l, a)| finish(Part::Decoder, l, a)));
    Ok(DiagnosticsRecord {
        images: patches.len(),
        partition_failures: failures,
        layers,
    })
}

impl DiagnosticsRecord {
    pub fn layer(&self, part: Part, layer: usize) -> Option<&LayerDiagnostics> {
        self.layers.iter().find(|l| l.part == part && l.layer == layer)
    }

    /// Long-format CSV: `part,layer,metric,index,value`; absent metrics
    /// are omitted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("part,layer,metric,index,value\n");
        for l in &self.layers {
            let mut row = |metric: &str, index: usize, v: f64| {
                out.push_str(&format!("{},{},{metric},{index},{v}\n", l.part.as_str(), l.layer));
            };
            row("sigma_f", 0, l.sigma_f);
            row("sigma_s", 0, l.sigma_s);
            row("nmi", 0, l.nmi);
            row("attention_distance", 0, l.attention_distance);
            let optional = [
                ("kld_attention", l.kld_attention),
                ("kld_cosine", l.kld_cosine),
                ("mu_intra_attention", l.mu_intra_attention),
                ("mu_inter_attention", l.mu_inter_attention),
                ("mu_intra_cosine", l.mu_intra_cosine),
                ("mu_inter_cosine", l.mu_inter_cosine),
                ("mask_token_variance", l.mask_token_variance),
                ("r_v_o", l.exploitation.map(|e| e.0)),
                ("r_m_o", l.exploitation.map(|e| e.1)),
            ];
            for (name, v) in optional {
                if let Some(v) = v {
                    row(name, 0, v);
                }
            }
            for (i, v) in l.fourier.delta_log_amplitude.iter().enumerate() {
                row("fourier_dlog_amplitude", i, *v);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
