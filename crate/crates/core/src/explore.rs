//! The inspection payloads shared by `inspect` and the HTTP API, plus
//! their SVG and plain-text renderings.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{
    self, decode_qkv, logit_lens, AttentionLink, AveragedAttention, DecodedToken, PinvCache, SThresholds,
};
use crate::model::{generate, ModelParams};
use crate::taskgen::Dataset;
use crate::vocab;

pub const TRACE_SCHEMA: &str = "horncircuit.trace/1";
pub const AVERAGE_SCHEMA: &str = "horncircuit.average/1";

/// Residual decodings per position shown in the diagram boxes.
const BOX_DECODINGS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunThresholds {
    pub link: f32,
    pub s_q: f64,
    pub s_k: f64,
    pub s_v: f64,
}

impl Default for RunThresholds {
    fn default() -> Self {
        let s = SThresholds::default();
        RunThresholds {
            link: 0.4,
            s_q: s.q,
            s_k: s.k,
            s_v: s.v,
        }
    }
}

impl RunThresholds {
    pub fn s(&self) -> SThresholds {
        SThresholds {
            q: self.s_q,
            k: self.s_k,
            v: self.s_v,
        }
    }
}

/// What to inspect: one prompt through one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub ckpt: String,
    pub prompt: String,
    #[serde(default)]
    pub thresholds: RunThresholds,
    /// Only links into these positions.
    #[serde(default)]
    pub dst_filter: Option<Vec<usize>>,
    /// Only links of this layer (1-based).
    #[serde(default)]
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceResponse {
    pub schema: String,
    pub ckpt: String,
    pub prompt: String,
    /// Prompt (with `@`) followed by the generated tokens.
    pub tokens: Vec<char>,
    pub prompt_len: usize,
    pub output: String,
    pub decision: Option<char>,
    /// `[row][position]`: row 0 is the embedding, row `l` the residual after layer `l`.
    pub residuals: Vec<Vec<Vec<DecodedToken>>>,
    /// `[layer][head][dst][src]`.
    pub attention: Vec<Vec<Vec<Vec<f32>>>>,
    pub links: Vec<AttentionLink>,
    pub thresholds: RunThresholds,
    pub dst_filter: Option<Vec<usize>>,
    pub layer: Option<usize>,
}

/// Accepts a prompt with or without the leading `@`.
pub fn prompt_tokens(prompt: &str) -> Result<Vec<u8>> {
    let body = prompt.strip_prefix('@').unwrap_or(prompt);
    if body.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    let mut ids = vec![vocab::BOS];
    ids.extend(vocab::encode(body).map_err(|e| match e {
        // report positions in the text as given
        Error::Encoding { ch, position } => Error::Encoding {
            ch,
            position: position + (prompt.len() - body.len()),
        },
        other => other,
    })?);
    Ok(ids)
}

/// Greedy generation, capture, link extraction and Q/K/V decoding for one prompt.
pub fn run(params: &ModelParams<f32>, req: &RunRequest, cache: &mut PinvCache) -> Result<TraceResponse> {
    let prompt = prompt_tokens(&req.prompt)?;
    let cfg = &params.config;
    if prompt.len() >= cfg.context_len {
        return Err(Error::Input(format!(
            "prompt of {} tokens leaves no room in a context of {}",
            prompt.len(),
            cfg.context_len
        )));
    }
    if let Some(layer) = req.layer {
        if layer == 0 || layer > cfg.n_layers {
            return Err(Error::Input(format!("layer {layer} not in 1..={}", cfg.n_layers)));
        }
    }
    let steps = cfg.context_len - prompt.len();
    let full = generate(params, &prompt, steps)?;
    let trace = interp::trace(params, &full)?;

    let mut residuals = Vec::with_capacity(cfg.n_layers + 1);
    residuals.push(decode_rows(params, &trace.layers[0].resid_pre)?);
    for lt in &trace.layers {
        residuals.push(decode_rows(params, &lt.resid_post)?);
    }
    let attention = trace
        .layers
        .iter()
        .map(|lt| {
            lt.patterns
                .iter()
                .map(|p| p.outer_iter().map(|r| r.to_vec()).collect())
                .collect()
        })
        .collect();

    let layers: Vec<usize> = match req.layer {
        Some(l) => vec![l],
        None => (1..=cfg.n_layers).collect(),
    };
    let s = req.thresholds.s();
    let mut links = Vec::new();
    for layer in layers {
        for mut link in interp::attention_links(&trace, layer, req.thresholds.link, req.dst_filter.as_deref())? {
            link.decoded = Some(decode_qkv(params, &trace, &link, &s, interp::DEFAULT_TOP_K, cache)?);
            links.push(link);
        }
    }
    let generated = &full[prompt.len()..];
    let output = vocab::decode(generated)?;
    let decision = output
        .rsplit_once('-')
        .and_then(|(_, d)| d.chars().next())
        .or_else(|| (generated.len() == 1).then(|| output.chars().next()).flatten());
    Ok(TraceResponse {
        schema: TRACE_SCHEMA.into(),
        ckpt: req.ckpt.clone(),
        prompt: vocab::decode(&prompt[1..])?,
        tokens: vocab::decode(&full)?.chars().collect(),
        prompt_len: prompt.len(),
        output,
        decision,
        residuals,
        attention,
        links,
        thresholds: req.thresholds,
        dst_filter: req.dst_filter.clone(),
        layer: req.layer,
    })
}

/// The exact bytes served for a response; `inspect --format json` prints the same.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(value)?)
}

fn decode_rows(params: &ModelParams<f32>, rows: &ndarray::Array2<f32>) -> Result<Vec<Vec<DecodedToken>>> {
    rows.outer_iter()
        .map(|r| logit_lens(params, r, interp::DEFAULT_TOP_K))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Positive,
    Negative,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Subset::All),
            "positive" => Ok(Subset::Positive),
            "negative" => Ok(Subset::Negative),
            other => Err(Error::Config(format!("unknown subset {other:?}"))),
        }
    }
}

impl Subset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::Positive => "positive",
            Subset::Negative => "negative",
        }
    }

    pub fn select(&self, dataset: &Dataset) -> Dataset {
        match self {
            Subset::All => dataset.clone(),
            Subset::Positive => dataset.subset(true),
            Subset::Negative => dataset.subset(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRequest {
    pub ckpt: String,
    #[serde(default = "default_subset")]
    pub subset: Subset,
    #[serde(default = "default_average_threshold")]
    pub threshold: f32,
    #[serde(default)]
    pub dst_filter: Option<Vec<usize>>,
}

fn default_subset() -> Subset {
    Subset::All
}

fn default_average_threshold() -> f32 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageResponse {
    pub schema: String,
    pub ckpt: String,
    pub subset: Subset,
    pub count: usize,
    pub threshold: f32,
    /// `[layer][head][dst][src]`.
    pub attention: Vec<Vec<Vec<Vec<f32>>>>,
    pub links: Vec<AttentionLink>,
    pub dst_filter: Option<Vec<usize>>,
    /// Structural token at each position, `·` where examples differ.
    pub template: Vec<char>,
}

/// Structural tokens of a sequence layout; `·` marks literal slots.
pub fn template(m: usize, supervision: vocab::Supervision) -> Vec<char> {
    const ANY: char = '·';
    let mut t = vec!['@'];
    for j in 0..m {
        t.extend([ANY, '>', ANY, if j + 1 == m { '|' } else { ',' }]);
    }
    t.extend([ANY, '>', ANY]);
    if supervision == vocab::Supervision::Cot {
        for i in 0..m {
            t.extend([ANY, '>', ANY]);
            if i + 1 < m {
                t.push(',');
            }
        }
        t.push('-');
    }
    t.push(ANY);
    t
}

/// Averages attention over the chosen subset of full (prompt plus target) sequences.
pub fn average(params: &ModelParams<f32>, dataset: &Dataset, req: &AverageRequest) -> Result<AverageResponse> {
    let subset = req.subset.select(dataset);
    let sequences: Vec<Vec<u8>> = subset.examples.iter().map(|e| e.tokens()).collect();
    let avg = interp::average_attention(params, &sequences)?;
    Ok(average_response(&avg, req, template(dataset.m, dataset.supervision)))
}

pub fn average_response(avg: &AveragedAttention, req: &AverageRequest, template: Vec<char>) -> AverageResponse {
    AverageResponse {
        schema: AVERAGE_SCHEMA.into(),
        ckpt: req.ckpt.clone(),
        subset: req.subset,
        count: avg.count,
        threshold: req.threshold,
        attention: avg
            .layers
            .iter()
            .map(|heads| heads.iter().map(|p| p.outer_iter().map(|r| r.to_vec()).collect()).collect())
            .collect(),
        links: avg.all_links(req.threshold, req.dst_filter.as_deref()),
        dst_filter: req.dst_filter.clone(),
        template,
    }
}

/// Views an average through the trace renderers: template tokens, no residual rows.
pub fn average_as_trace(avg: &AverageResponse) -> TraceResponse {
    let prompt_len = avg.template.iter().position(|&c| c == '|').map_or(avg.template.len(), |p| p + 4);
    TraceResponse {
        schema: AVERAGE_SCHEMA.into(),
        ckpt: avg.ckpt.clone(),
        prompt: format!("{} average over {} sequences", avg.subset.as_str(), avg.count),
        tokens: avg.template.clone(),
        prompt_len,
        output: String::new(),
        decision: None,
        residuals: Vec::new(),
        attention: avg.attention.clone(),
        links: avg.links.clone(),
        thresholds: RunThresholds {
            link: avg.threshold,
            ..Default::default()
        },
        dst_filter: avg.dst_filter.clone(),
        layer: None,
    }
}

/// Named destination presets: output `>` positions, output `,` positions, or the final `-`.
pub fn dst_preset(name: &str, m: usize) -> Option<Vec<usize>> {
    let layout = vocab::Layout::cot(m);
    match name {
        ">" | "implies" => Some(layout.output_implies_positions()),
        "," | "comma" => Some(layout.output_comma_positions()),
        "-" | "dash" => Some(vec![layout.dash()]),
        _ => None,
    }
}

/// Parses `25,29,33`, a preset name, or a mix of both.
pub fn parse_dst_filter(spec: &str, m: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(|c| c == ';' || c == ' ').filter(|p| !p.is_empty()) {
        if let Some(p) = dst_preset(part, m) {
            out.extend(p);
            continue;
        }
        for n in part.split(',').filter(|p| !p.is_empty()) {
            out.push(
                n.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad position {n:?} in destination filter")))?,
            );
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn esc(c: char) -> String {
    match c {
        '>' => "&gt;".into(),
        '<' => "&lt;".into(),
        '&' => "&amp;".into(),
        c => c.to_string(),
    }
}

fn esc_str(s: &str) -> String {
    s.chars().map(esc).collect()
}

const CELL: f32 = 34.0;
const ROW_GAP: f32 = 130.0;
const MARGIN: f32 = 70.0;

/// Standalone SVG: input, layer 1, layer 2 (and further layers) and output
/// rows bottom to top; link width grows with strength; Q/K/V decodings in red.
pub fn render_svg(resp: &TraceResponse) -> String {
    let n = resp.tokens.len();
    let layers = resp.attention.len();
    let rows = layers + 2;
    let width = MARGIN * 2.0 + CELL * n as f32;
    let height = MARGIN * 2.0 + ROW_GAP * (rows - 1) as f32;
    let row_y = |r: usize| height - MARGIN - ROW_GAP * r as f32;
    let col_x = |p: usize| MARGIN + CELL * p as f32 + CELL / 2.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="monospace">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let labels: Vec<String> = std::iter::once("input".to_string())
        .chain((1..=layers).map(|l| format!("layer {l}")))
        .chain(std::iter::once("output".to_string()))
        .collect();
    for (r, label) in labels.iter().enumerate() {
        let _ = writeln!(
            svg,
            r##"<text x="4" y="{:.1}" font-size="11" fill="#444">{label}</text>"##,
            row_y(r) + 4.0
        );
    }
    // given rules / query split on the input row
    if resp.prompt_len > 0 {
        let split = resp.tokens.iter().position(|&c| c == '|').unwrap_or(resp.prompt_len - 1);
        let _ = writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-size="10" fill="#666">given rules</text>"##,
            col_x(1) - CELL / 2.0,
            row_y(0) + 40.0
        );
        let _ = writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-size="10" fill="#666">query</text>"##,
            col_x(split + 1) - CELL / 2.0,
            row_y(0) + 40.0
        );
    }

    for link in &resp.links {
        let (x1, y1) = (col_x(link.src), row_y(link.layer - 1) - 12.0);
        let (x2, y2) = (col_x(link.dst), row_y(link.layer) + 16.0);
        let w = 0.5 + 5.0 * link.strength;
        let _ = writeln!(
            svg,
            r##"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="#2b6cb0" stroke-opacity="0.7" stroke-width="{w:.2}"><title>layer {} head {}: {} -> {} ({:.3})</title></line>"##,
            link.layer, link.head, link.src, link.dst, link.strength
        );
        if let Some(d) = &link.decoded {
            let top = |v: &[DecodedToken]| v.first().map_or("?".to_string(), |t| esc(t.token));
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="9" fill="red" text-anchor="middle">Q:{} K:{} V:{}</text>"#,
                (x1 + x2) / 2.0,
                (y1 + y2) / 2.0,
                top(&d.q),
                top(&d.k),
                top(&d.v)
            );
        }
    }

    for p in 0..n {
        let x = col_x(p);
        let tok = esc(resp.tokens[p]);
        let query = p >= resp.prompt_len;
        let fill = if query { "#fff7e6" } else { "#f5f5f5" };
        let _ = writeln!(
            svg,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="26" fill="{fill}" stroke="#999"/><text x="{x:.1}" y="{:.1}" font-size="13" text-anchor="middle">{tok}</text><text x="{x:.1}" y="{:.1}" font-size="8" fill="#777" text-anchor="middle">{p}</text>"##,
            x - CELL / 2.0 + 2.0,
            row_y(0) - 13.0,
            CELL - 4.0,
            row_y(0) + 4.0,
            row_y(0) + 24.0
        );
        for r in 1..=layers {
            let Some(decs) = resp.residuals.get(r).and_then(|row| row.get(p)) else {
                continue;
            };
            let main = decs.first().map_or(String::new(), |d| esc(d.token));
            let rest: String = decs
                .iter()
                .skip(1)
                .take(BOX_DECODINGS - 1)
                .map(|d| esc(d.token))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(
                svg,
                r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="26" fill="white" stroke="#bbb"/><text x="{x:.1}" y="{:.1}" font-size="12" text-anchor="middle">{main}</text><text x="{x:.1}" y="{:.1}" font-size="8" fill="#888" text-anchor="middle">{rest}</text>"##,
                x - CELL / 2.0 + 2.0,
                row_y(r) - 13.0,
                CELL - 4.0,
                row_y(r) + 1.0,
                row_y(r) + 10.0
            );
        }
        // emitted token at p is the input at p + 1
        if p + 1 < n && p + 1 >= resp.prompt_len {
            let _ = writeln!(
                svg,
                r##"<text x="{x:.1}" y="{:.1}" font-size="13" text-anchor="middle" fill="#1a202c">{}</text>"##,
                row_y(rows - 1) + 4.0,
                esc(resp.tokens[p + 1])
            );
        }
    }
    let _ = writeln!(
        svg,
        r##"<text x="{:.1}" y="20" font-size="12">{} &#8594; {}</text>"##,
        MARGIN,
        esc_str(&resp.prompt),
        esc_str(&resp.output)
    );
    svg.push_str("</svg>\n");
    svg
}

/// Aligned plain-text rendering: token rows, residual decodings and the link list.
pub fn render_text(resp: &TraceResponse) -> String {
    let n = resp.tokens.len();
    let mut out = String::new();
    let _ = writeln!(out, "prompt  {}", resp.prompt);
    let _ = writeln!(out, "output  {}", resp.output);
    let line = |label: &str, f: &dyn Fn(usize) -> String| {
        let cells: String = (0..n).map(|p| format!("{:>3}", f(p))).collect();
        format!("{label:<8}{cells}\n")
    };
    out.push_str(&line("pos", &|p| (p % 100).to_string()));
    out.push_str(&line("input", &|p| resp.tokens[p].to_string()));
    for (r, row) in resp.residuals.iter().enumerate().skip(1) {
        for rank in 0..BOX_DECODINGS {
            let label = if rank == 0 { format!("layer {r}") } else { String::new() };
            out.push_str(&line(&label, &|p| {
                row[p].get(rank).map_or(String::new(), |d| d.token.to_string())
            }));
        }
    }
    out.push_str(&line("emits", &|p| {
        if p + 1 < n && p + 1 >= resp.prompt_len {
            resp.tokens[p + 1].to_string()
        } else {
            String::new()
        }
    }));
    let _ = writeln!(out, "\n{} links (threshold {})", resp.links.len(), resp.thresholds.link);
    for l in &resp.links {
        let _ = write!(
            out,
            "L{} h{}  {:>2} {} -> {:>2} {}  {:.3}",
            l.layer, l.head, l.src, resp.tokens[l.src], l.dst, resp.tokens[l.dst], l.strength
        );
        if let Some(d) = &l.decoded {
            let tops = |v: &[DecodedToken]| v.iter().map(|t| t.token).collect::<String>();
            let _ = write!(out, "  Q={} K={} V={}", tops(&d.q), tops(&d.k), tops(&d.v));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn response(threshold: f32) -> TraceResponse {
        let params = ModelParams::<f32>::init(&ModelConfig::default(), 2).unwrap();
        let req = RunRequest {
            ckpt: "x".into(),
            prompt: "C>D,A>B,B>C,E>F,D>E|A>F".into(),
            thresholds: RunThresholds {
                link: threshold,
                ..Default::default()
            },
            dst_filter: None,
            layer: None,
        };
        run(&params, &req, &mut PinvCache::new()).unwrap()
    }

    #[test]
    fn response_shapes() {
        let r = response(0.4);
        assert_eq!(r.schema, TRACE_SCHEMA);
        assert_eq!(r.tokens.len(), 45);
        assert_eq!(r.prompt_len, 24);
        assert_eq!(r.output.chars().count(), 21);
        assert_eq!(r.residuals.len(), 3);
        assert!(r.residuals.iter().all(|row| row.len() == 45 && row[0].len() == 3));
        for layer in &r.attention {
            for row in &layer[0] {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
        assert!(response(1.01).links.is_empty());
    }

    #[test]
    fn json_round_trip_and_renderings() {
        let r = response(0.05);
        let json = serde_json::to_string(&r).unwrap();
        let back: TraceResponse = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        let svg = render_svg(&r);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<line").count(), r.links.len());
        assert!(svg.contains(r#"fill="red""#) || r.links.is_empty());
        let text = render_text(&r);
        assert!(text.contains(&format!("{} links", r.links.len())));
    }

    #[test]
    fn prompt_errors_carry_positions() {
        assert_eq!(prompt_tokens("@A>B").unwrap(), prompt_tokens("A>B").unwrap());
        match prompt_tokens("A>b") {
            Err(Error::Encoding { ch: 'b', position: 2 }) => {}
            other => panic!("{other:?}"),
        }
        match prompt_tokens("@A>b") {
            Err(Error::Encoding { position: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn destination_filters() {
        assert_eq!(parse_dst_filter(">", 5).unwrap(), vec![25, 29, 33, 37, 41]);
        assert_eq!(parse_dst_filter("-", 5).unwrap(), vec![43]);
        assert_eq!(parse_dst_filter("27,25;-", 5).unwrap(), vec![25, 27, 43]);
        assert!(parse_dst_filter("x", 5).is_err());
    }

    #[test]
    fn templates_match_layouts() {
        let t: String = template(5, vocab::Supervision::Cot).into_iter().collect();
        assert_eq!(t, "@·>·,·>·,·>·,·>·,·>·|·>··>·,·>·,·>·,·>·,·>·-·");
        assert_eq!(t.chars().count(), vocab::Layout::cot(5).seq_len());
        let b = template(5, vocab::Supervision::Binary);
        assert_eq!(b.len(), vocab::Layout::new(5, vocab::Supervision::Binary).seq_len());
    }

    #[test]
    fn averages_render_through_the_trace_view() {
        let params = ModelParams::<f32>::init(&ModelConfig::default(), 2).unwrap();
        let data = crate::taskgen::gen_dataset(6, 20, 5, 1, vocab::Supervision::Cot).unwrap();
        let req = AverageRequest {
            ckpt: "x".into(),
            subset: Subset::Positive,
            threshold: 0.05,
            dst_filter: Some(vec![43]),
        };
        let avg = average(&params, &data, &req).unwrap();
        assert_eq!(avg.count, data.positives());
        assert!(avg.links.iter().all(|l| l.dst == 43));
        let view = average_as_trace(&avg);
        assert_eq!(view.prompt_len, 24);
        assert_eq!(render_svg(&view).matches("<line").count(), avg.links.len());
        assert!(render_text(&view).contains("links"));
    }
}
