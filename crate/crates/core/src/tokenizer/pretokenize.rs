//! Splits raw bytes into merge-isolated chunks.
//!
//! A chunk is an optional single leading space (the word boundary marker)
//! followed by a run of one byte class, or a run of whitespace that is not
//! attached to a following word. Merges never cross chunk edges.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ByteClass {
    Space,
    Letter,
    Digit,
    Punct,
}

pub(crate) fn class_of(b: u8) -> ByteClass {
    match b {
        b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => ByteClass::Space,
        b'a'..=b'z' | b'A'..=b'Z' | b'\'' | 0x80..=0xff => ByteClass::Letter,
        b'0'..=b'9' => ByteClass::Digit,
        _ => ByteClass::Punct,
    }
}

/// Byte ranges of the chunks of `bytes`, covering it exactly.
pub(crate) fn chunks(bytes: &[u8]) -> Vec<(usize, usize)> {
    let n = bytes.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if class_of(bytes[i]) == ByteClass::Space {
            let mut j = i;
            while j < n && class_of(bytes[j]) == ByteClass::Space {
                j += 1;
            }
            if j < n && bytes[j - 1] == b' ' {
                if j - 1 > i {
                    out.push((i, j - 1));
                }
                i = j - 1;
            } else {
                out.push((i, j));
                i = j;
                continue;
            }
        }
        let start = i;
        let mut k = if bytes[i] == b' ' { i + 1 } else { i };
        let class = class_of(bytes[k]);
        while k < n && class_of(bytes[k]) == class {
            k += 1;
        }
        out.push((start, k));
        i = k;
    }
    out
}
