/// Records every layer executed by a forward pass together with its
/// floating-point operation count. Used to prove which subgraphs run at
/// inference time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecTrace {
    nodes: Vec<(String, u64)>,
}

impl ExecTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, node: &str, flops: u64) {
        self.nodes.push((node.to_string(), flops));
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|(n, _)| n.as_str())
    }

    pub fn total_flops(&self) -> u64 {
        self.nodes.iter().map(|(_, f)| f).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.nodes.iter().filter(|(n, _)| n.starts_with(prefix)).count()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}
