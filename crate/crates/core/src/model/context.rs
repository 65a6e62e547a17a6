//! Per-call execution state: layer tracing, per-category FLOP/op counters
//! and wall-clock accounting. A default context records nothing.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};

/// Module category used for parameter, FLOP and latency attribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    FeedForward,
    SelfAttention,
    Convolution,
    Normalization,
    Activation,
    Other,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::FeedForward,
        Category::SelfAttention,
        Category::Convolution,
        Category::Normalization,
        Category::Activation,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::FeedForward => "feed_forward",
            Category::SelfAttention => "self_attention",
            Category::Convolution => "convolution",
            Category::Normalization => "normalization",
            Category::Activation => "activation",
            Category::Other => "other",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One value per category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PerCategory<T>(pub [T; 6]);

impl<T: Copy + std::iter::Sum<T>> PerCategory<T> {
    pub fn total(&self) -> T {
        self.0.iter().copied().sum()
    }
}

impl<T> PerCategory<T> {
    pub fn iter(&self) -> impl Iterator<Item = (Category, &T)> {
        Category::ALL.into_iter().zip(self.0.iter())
    }
}

impl<T> Index<Category> for PerCategory<T> {
    type Output = T;
    fn index(&self, c: Category) -> &T {
        &self.0[c.index()]
    }
}

impl<T> IndexMut<Category> for PerCategory<T> {
    fn index_mut(&mut self, c: Category) -> &mut T {
        &mut self.0[c.index()]
    }
}

/// Output of one linear/convolution layer captured during a traced pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry<E = f32> {
    pub path: String,
    pub output: Tensor<E>,
}

#[derive(Debug)]
pub struct RunContext<E = f32> {
    pub(crate) trace: Option<Vec<TraceEntry<E>>>,
    pub(crate) flops: Option<PerCategory<u64>>,
    pub(crate) ops: Option<PerCategory<u64>>,
    pub(crate) latency_ns: Option<PerCategory<u64>>,
    /// Let non-finite values flow instead of raising a divergence error.
    pub(crate) nan_tolerant: bool,
    /// Check every op output and fail at the first non-finite one.
    pub(crate) check_each: bool,
}

impl<E> Default for RunContext<E> {
    fn default() -> Self {
        Self {
            trace: None,
            flops: None,
            ops: None,
            latency_ns: None,
            nan_tolerant: false,
            check_each: false,
        }
    }
}

impl<E: Element> RunContext<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn with_counters(mut self) -> Self {
        self.flops = Some(PerCategory::default());
        self.ops = Some(PerCategory::default());
        self
    }

    pub fn with_timing(mut self) -> Self {
        self.latency_ns = Some(PerCategory::default());
        self
    }

    pub fn nan_tolerant(mut self) -> Self {
        self.nan_tolerant = true;
        self
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry<E>> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn trace(&self) -> &[TraceEntry<E>] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn flops(&self) -> Option<&PerCategory<u64>> {
        self.flops.as_ref()
    }

    /// Standalone op invocations per category (epilogues do not count).
    pub fn ops(&self) -> Option<&PerCategory<u64>> {
        self.ops.as_ref()
    }

    pub fn latency_ns(&self) -> Option<&PerCategory<u64>> {
        self.latency_ns.as_ref()
    }

    /// Runs one op, attributing its cost and wall-clock time to `category`.
    pub(crate) fn op<R>(&mut self, category: Category, flops: u64, f: impl FnOnce() -> R) -> R {
        if let Some(counts) = self.flops.as_mut() {
            counts[category] += flops;
        }
        if let Some(ops) = self.ops.as_mut() {
            ops[category] += 1;
        }
        match self.latency_ns.as_mut() {
            Some(latency) => {
                let start = Instant::now();
                let out = f();
                latency[category] += start.elapsed().as_nanos() as u64;
                out
            }
            None => f(),
        }
    }

    /// Adds FLOPs executed inside another op (activation epilogues).
    pub(crate) fn add_flops(&mut self, category: Category, flops: u64) {
        if let Some(counts) = self.flops.as_mut() {
            counts[category] += flops;
        }
    }

    pub(crate) fn record(&mut self, path: &str, output: &Tensor<E>) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry {
                path: path.to_string(),
                output: output.clone(),
            });
        }
    }

    /// Fresh context that pinpoints the first non-finite op output.
    pub(crate) fn checking() -> Self {
        Self {
            check_each: true,
            ..Self::default()
        }
    }
}
