use super::SubwordVocab;

#[derive(Debug, Clone, Default)]
struct Node {
    // Sorted by byte; vocabularies are small so a linear scan is fine.
    children: Vec<(u8, u32)>,
    token: Option<u32>,
}

/// Trie over reversed token byte strings, for longest-suffix lookup.
#[derive(Debug, Clone)]
pub struct SuffixIndex {
    nodes: Vec<Node>,
}

impl SuffixIndex {
    pub fn new(vocab: &SubwordVocab) -> Self {
        let mut nodes = vec![Node::default()];
        for (id, bytes) in vocab.iter_tokens() {
            let mut cur = 0usize;
            for &b in bytes.iter().rev() {
                let next = match nodes[cur].children.binary_search_by_key(&b, |c| c.0) {
                    Ok(i) => nodes[cur].children[i].1 as usize,
                    Err(i) => {
                        nodes.push(Node::default());
                        let n = nodes.len() - 1;
                        nodes[cur].children.insert(i, (b, n as u32));
                        n
                    }
                };
                cur = next;
            }
            nodes[cur].token = Some(id);
        }
        Self { nodes }
    }

    /// Id of the longest token whose bytes end `x[..=i]`.
    pub fn longest_suffix_token(&self, x: &[u8], i: usize) -> u32 {
        let mut cur = 0usize;
        let mut best = x[i] as u32;
        for j in (0..=i).rev() {
            match self.nodes[cur]
                .children
                .binary_search_by_key(&x[j], |c| c.0)
            {
                Ok(k) => cur = self.nodes[cur].children[k].1 as usize,
                Err(_) => break,
            }
            if let Some(t) = self.nodes[cur].token {
                best = t;
            }
        }
        best
    }

    /// Longest-suffix id for every position of `x`.
    pub fn suffix_ids(&self, x: &[u8]) -> Vec<u32> {
        (0..x.len())
            .map(|i| self.longest_suffix_token(x, i))
            .collect()
    }
}
