use super::{TokenizerError, CLS_ID, PAD_ID, SEP_ID};

/// A fixed-length model input. Positions with mask 0 hold the pad id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBlock {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl TokenBlock {
    pub fn full(ids: Vec<u32>) -> Self {
        let attention_mask = vec![1; ids.len()];
        TokenBlock { ids, attention_mask }
    }

    /// Right-pads (or truncates) `ids` to `len`.
    pub fn padded(ids: &[u32], len: usize) -> Self {
        let keep = ids.len().min(len);
        let mut block_ids = ids[..keep].to_vec();
        let mut mask = vec![1u8; keep];
        block_ids.resize(len, PAD_ID);
        mask.resize(len, 0);
        TokenBlock { ids: block_ids, attention_mask: mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.ids.len() == self.attention_mask.len()
            && self
                .ids
                .iter()
                .zip(&self.attention_mask)
                .all(|(&id, &m)| m == 1 || (m == 0 && id == PAD_ID))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBlocks {
    pub blocks: Vec<TokenBlock>,
    /// Tokens left over in the final partial block.
    pub dropped: usize,
}

/// Surrounds each tokenized document with cls/sep and concatenates them.
pub fn frame_documents<I>(docs: I) -> impl Iterator<Item = u32>
where
    I: IntoIterator<Item = Vec<u32>>,
{
    docs.into_iter().flat_map(|d| {
        std::iter::once(CLS_ID)
            .chain(d)
            .chain(std::iter::once(SEP_ID))
    })
}

/// Cuts a token stream into contiguous full blocks of `block_len`; the final
/// partial block is dropped.
pub fn pack_blocks<I>(stream: I, block_len: usize) -> PackedBlocks
where
    I: IntoIterator<Item = u32>,
{
    assert!(block_len >= 2, "block_len must be at least 2");
    let mut blocks = Vec::new();
    let mut cur = Vec::with_capacity(block_len);
    for id in stream {
        cur.push(id);
        if cur.len() == block_len {
            blocks.push(TokenBlock::full(std::mem::replace(
                &mut cur,
                Vec::with_capacity(block_len),
            )));
        }
    }
    PackedBlocks { blocks, dropped: cur.len() }
}

/// One block per line as space-separated ids. Pad ids mark masked
/// positions, so the mask is not stored.
pub fn blocks_to_text(blocks: &[TokenBlock]) -> String {
    let mut s = String::new();
    for b in blocks {
        let ids: Vec<String> = b
            .ids
            .iter()
            .zip(&b.attention_mask)
            .map(|(id, &m)| if m == 1 { id.to_string() } else { PAD_ID.to_string() })
            .collect();
        s.push_str(&ids.join(" "));
        s.push('\n');
    }
    s
}

/// Reads [`blocks_to_text`] output. Every block must have the same length.
pub fn parse_blocks(text: &str) -> Result<Vec<TokenBlock>, TokenizerError> {
    let mut blocks: Vec<TokenBlock> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let ids = line
            .split_whitespace()
            .map(str::parse::<u32>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TokenizerError::Malformed(format!("block line {}: {e}", i + 1)))?;
        if blocks.first().is_some_and(|b| b.len() != ids.len()) {
            return Err(TokenizerError::Malformed(format!(
                "block line {} has {} ids, expected {}",
                i + 1,
                ids.len(),
                blocks[0].len()
            )));
        }
        let attention_mask = ids.iter().map(|&id| u8::from(id != PAD_ID)).collect();
        blocks.push(TokenBlock { ids, attention_mask });
    }
    Ok(blocks)
}
