//! Splits text into the chunks that merges are confined to.
//!
//! Chunks are runs of letters, runs of digits, runs of other visible
//! characters, or whitespace. A single space directly before a visible run
//! is glued onto it (so `" the"` is one chunk). Concatenating the chunks
//! gives back the input exactly.

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Number,
    Other,
}

fn class_of(c: char) -> Class {
    if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Number
    } else {
        Class::Other
    }
}

pub fn split_chunks(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let offset = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let mut start = i;
        if chars[i].1.is_whitespace() {
            let mut j = i;
            while j < n && chars[j].1.is_whitespace() {
                j += 1;
            }
            if j < n && chars[j - 1].1 == ' ' {
                if j - 1 > i {
                    out.push(&text[offset(i)..offset(j - 1)]);
                }
                start = j - 1;
                i = j;
            } else {
                out.push(&text[offset(i)..offset(j)]);
                i = j;
                continue;
            }
        }
        let class = class_of(chars[i].1);
        while i < n && !chars[i].1.is_whitespace() && class_of(chars[i].1) == class {
            i += 1;
        }
        out.push(&text[offset(start)..offset(i)]);
    }
    out
}
