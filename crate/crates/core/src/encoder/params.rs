use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::data_model::QuerySet;
use crate::rng::SeededRng;

/// Which prediction head a parameter set carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Uner,
    Bio,
}

impl std::str::FromStr for HeadKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "uner" => Ok(HeadKind::Uner),
            "bio" => Ok(HeadKind::Bio),
            other => Err(crate::Error::Config(format!("unknown head {other:?}"))),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Uner => "uner",
            HeadKind::Bio => "bio",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnerWeights {
    /// Hash-bucketed word table for query names, `vocab_size x h`.
    pub query_content: Array2<f64>,
    pub query_proj: Array2<f64>,
    pub query_bias: Array1<f64>,
    pub qtc_hidden: Array2<f64>,
    pub qtc_hidden_bias: Array1<f64>,
    pub qtc_out: Array1<f64>,
    /// Length one.
    pub qtc_out_bias: Array1<f64>,
    pub top_bilinear: Array2<f64>,
    pub top_head: Array1<f64>,
    pub top_tail: Array1<f64>,
    /// Length one.
    pub top_bias: Array1<f64>,
}

/// Linear `h -> 2C+1` tagger.
#[derive(Debug, Clone, PartialEq)]
pub struct BioWeights {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum HeadWeights {
    Uner(UnerWeights),
    Bio(BioWeights),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// Hash-bucketed token content table, `vocab_size x h`.
    pub content: Array2<f64>,
    /// Linear map from box features to width `h`.
    pub bbox_proj: Array2<f64>,
    pub position: Option<Array2<f64>>,
    pub attention: Vec<AttentionWeights>,
    pub head: HeadWeights,
}

/// Read-only view of one named tensor.
#[derive(Debug)]
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl Parameters {
    /// All tensors zero, shaped for `cfg`. A BIO head gets `2C+1` classes.
    pub fn zeros(cfg: &ModelConfig, head: HeadKind, queries: &QuerySet) -> Self {
        let h = cfg.h;
        let m = |r, c| Array2::zeros((r, c));
        let v = |n| Array1::zeros(n);
        Parameters {
            content: m(cfg.vocab_size, h),
            bbox_proj: m(cfg.bbox_feature_count(), h),
            position: cfg.use_1d_position.then(|| m(cfg.max_positions, h)),
            attention: (0..cfg.attention_rounds)
                .map(|_| AttentionWeights {
                    query: m(h, h),
                    key: m(h, h),
                    value: m(h, h),
                    output: m(h, h),
                })
                .collect(),
            head: match head {
                HeadKind::Uner => HeadWeights::Uner(UnerWeights {
                    query_content: m(cfg.vocab_size, h),
                    query_proj: m(h, h),
                    query_bias: v(h),
                    qtc_hidden: m(h, h),
                    qtc_hidden_bias: v(h),
                    qtc_out: v(h),
                    qtc_out_bias: v(1),
                    top_bilinear: m(h, h),
                    top_head: v(h),
                    top_tail: v(h),
                    top_bias: v(1),
                }),
                HeadKind::Bio => HeadWeights::Bio(BioWeights {
                    weight: m(h, 2 * queries.len() + 1),
                    bias: v(2 * queries.len() + 1),
                }),
            },
        }
    }

    /// Glorot-uniform weights from `cfg.seed`; biases start at zero.
    ///
    /// Each weight tensor is drawn from `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// tensors in [`Parameters::tensors`] order, elements in row-major order.
    pub fn init(cfg: &ModelConfig, head: HeadKind, queries: &QuerySet) -> Self {
        let mut params = Parameters::zeros(cfg, head, queries);
        let mut rng = SeededRng::new(cfg.seed);
        for (name, shape, data) in params.tensors_mut() {
            if is_bias(&name) {
                continue;
            }
            let (fan_in, fan_out) = match shape.as_slice() {
                [r, c] => (*r, *c),
                [n] => (*n, 1),
                _ => unreachable!(),
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in data.iter_mut() {
                *x = rng.symmetric(a);
            }
        }
        params
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.head {
            HeadWeights::Uner(_) => HeadKind::Uner,
            HeadWeights::Bio(_) => HeadKind::Bio,
        }
    }

    pub fn uner(&self) -> Option<&UnerWeights> {
        match &self.head {
            HeadWeights::Uner(u) => Some(u),
            HeadWeights::Bio(_) => None,
        }
    }

    pub fn bio(&self) -> Option<&BioWeights> {
        match &self.head {
            HeadWeights::Bio(b) => Some(b),
            HeadWeights::Uner(_) => None,
        }
    }

    /// Zeros shaped like `self` except the two hash tables, which get no rows.
    /// Per-document gradients pair this with row-wise table gradients.
    pub(crate) fn zeros_without_tables(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.len());
        let h = self.content.ncols();
        Parameters {
            content: Array2::zeros((0, h)),
            bbox_proj: z2(&self.bbox_proj),
            position: self.position.as_ref().map(z2),
            attention: self
                .attention
                .iter()
                .map(|a| AttentionWeights {
                    query: z2(&a.query),
                    key: z2(&a.key),
                    value: z2(&a.value),
                    output: z2(&a.output),
                })
                .collect(),
            head: match &self.head {
                HeadWeights::Uner(u) => HeadWeights::Uner(UnerWeights {
                    query_content: Array2::zeros((0, h)),
                    query_proj: z2(&u.query_proj),
                    query_bias: z1(&u.query_bias),
                    qtc_hidden: z2(&u.qtc_hidden),
                    qtc_hidden_bias: z1(&u.qtc_hidden_bias),
                    qtc_out: z1(&u.qtc_out),
                    qtc_out_bias: z1(&u.qtc_out_bias),
                    top_bilinear: z2(&u.top_bilinear),
                    top_head: z1(&u.top_head),
                    top_tail: z1(&u.top_tail),
                    top_bias: z1(&u.top_bias),
                }),
                HeadWeights::Bio(b) => HeadWeights::Bio(BioWeights {
                    weight: z2(&b.weight),
                    bias: z1(&b.bias),
                }),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, _, data) in out.tensors_mut() {
            data.fill(0.0);
        }
        out
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        fn v2<'a>(name: impl Into<String>, a: &'a Array2<f64>) -> TensorView<'a> {
            TensorView {
                name: name.into(),
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            }
        }
        fn v1<'a>(name: &str, a: &'a Array1<f64>) -> TensorView<'a> {
            TensorView {
                name: name.into(),
                shape: vec![a.len()],
                data: a.as_slice().expect("standard layout"),
            }
        }
        let mut out = vec![v2("content", &self.content), v2("bbox_proj", &self.bbox_proj)];
        if let Some(p) = &self.position {
            out.push(v2("position", p));
        }
        for (r, a) in self.attention.iter().enumerate() {
            out.push(v2(format!("attention.{r}.query"), &a.query));
            out.push(v2(format!("attention.{r}.key"), &a.key));
            out.push(v2(format!("attention.{r}.value"), &a.value));
            out.push(v2(format!("attention.{r}.output"), &a.output));
        }
        match &self.head {
            HeadWeights::Uner(u) => {
                out.push(v2("query.content", &u.query_content));
                out.push(v2("query.proj", &u.query_proj));
                out.push(v1("query.bias", &u.query_bias));
                out.push(v2("qtc.hidden", &u.qtc_hidden));
                out.push(v1("qtc.hidden_bias", &u.qtc_hidden_bias));
                out.push(v1("qtc.out", &u.qtc_out));
                out.push(v1("qtc.out_bias", &u.qtc_out_bias));
                out.push(v2("top.bilinear", &u.top_bilinear));
                out.push(v1("top.head", &u.top_head));
                out.push(v1("top.tail", &u.top_tail));
                out.push(v1("top.bias", &u.top_bias));
            }
            HeadWeights::Bio(b) => {
                out.push(v2("bio.weight", &b.weight));
                out.push(v1("bio.bias", &b.bias));
            }
        }
        out
    }

    /// Mutable `(name, shape, data)` for every tensor, in [`Parameters::tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f64])> {
        fn m2(name: String, a: &mut Array2<f64>) -> (String, Vec<usize>, &mut [f64]) {
            let shape = a.shape().to_vec();
            (name, shape, a.as_slice_mut().expect("standard layout"))
        }
        fn m1<'a>(name: &str, a: &'a mut Array1<f64>) -> (String, Vec<usize>, &'a mut [f64]) {
            let shape = vec![a.len()];
            (name.into(), shape, a.as_slice_mut().expect("standard layout"))
        }
        let mut out = vec![
            m2("content".into(), &mut self.content),
            m2("bbox_proj".into(), &mut self.bbox_proj),
        ];
        if let Some(p) = &mut self.position {
            out.push(m2("position".into(), p));
        }
        for (r, a) in self.attention.iter_mut().enumerate() {
            out.push(m2(format!("attention.{r}.query"), &mut a.query));
            out.push(m2(format!("attention.{r}.key"), &mut a.key));
            out.push(m2(format!("attention.{r}.value"), &mut a.value));
            out.push(m2(format!("attention.{r}.output"), &mut a.output));
        }
        match &mut self.head {
            HeadWeights::Uner(u) => {
                out.push(m2("query.content".into(), &mut u.query_content));
                out.push(m2("query.proj".into(), &mut u.query_proj));
                out.push(m1("query.bias", &mut u.query_bias));
                out.push(m2("qtc.hidden".into(), &mut u.qtc_hidden));
                out.push(m1("qtc.hidden_bias", &mut u.qtc_hidden_bias));
                out.push(m1("qtc.out", &mut u.qtc_out));
                out.push(m1("qtc.out_bias", &mut u.qtc_out_bias));
                out.push(m2("top.bilinear".into(), &mut u.top_bilinear));
                out.push(m1("top.head", &mut u.top_head));
                out.push(m1("top.tail", &mut u.top_tail));
                out.push(m1("top.bias", &mut u.top_bias));
            }
            HeadWeights::Bio(b) => {
                out.push(m2("bio.weight".into(), &mut b.weight));
                out.push(m1("bio.bias", &mut b.bias));
            }
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }

    /// Overwrites every value from a flat vector in [`Parameters::to_flat`] order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for (_, _, data) in self.tensors_mut() {
            data.copy_from_slice(&flat[at..at + data.len()]);
            at += data.len();
        }
        assert_eq!(at, flat.len(), "flat vector length");
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        let theirs = other.tensors();
        for ((_, _, mine), t) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, &b) in mine.iter_mut().zip(t.data) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, _, data) in self.tensors_mut() {
            data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Bitwise equality of every tensor.
    pub fn bit_equal(&self, other: &Parameters) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.name == y.name
                    && x.shape == y.shape
                    && Zip::from(x.data)
                        .and(y.data)
                        .fold(true, |acc, p, q| acc && p.to_bits() == q.to_bits())
            })
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with("bias")
}
