//! Tolerant HTML tag scanner.
//!
//! Not a parser: it tracks a stack of open elements, closes unmatched
//! elements when an ancestor's end tag shows up, and never fails. Good enough
//! to find which element encloses a piece of text on real product pages.

/// An element located in the source, all offsets in bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    pub name: String,
    /// Offset of `<`.
    pub start: usize,
    /// Offset just past the opening tag's `>`.
    pub open_end: usize,
    /// Offset of the closing tag (or where the element was implicitly closed).
    pub content_end: usize,
    /// Offset just past the closing tag.
    pub end: usize,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextNode {
    pub start: usize,
    pub end: usize,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Document {
    pub elements: Vec<Element>,
    pub texts: Vec<TextNode>,
}

const VOID: &[&str] = &[
    "area", "base", "br", "col", "embed", "hr", "img", "input", "link", "meta", "param", "source",
    "track", "wbr",
];
const RAW_TEXT: &[&str] = &["script", "style"];

fn is_name_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'-' || b == b':' || b == b'_'
}

/// Finds the end of a tag starting at `from` (just after the name), honoring
/// quoted attribute values. Returns the offset just past `>`.
fn tag_end(bytes: &[u8], from: usize) -> usize {
    let mut i = from;
    let mut quote: Option<u8> = None;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(q) if b == q => quote = None,
            Some(_) => {}
            None if b == b'"' || b == b'\'' => quote = Some(b),
            None if b == b'>' => return i + 1,
            None => {}
        }
        i += 1;
    }
    bytes.len()
}

fn find_ci(haystack: &[u8], from: usize, needle: &[u8]) -> Option<usize> {
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    (from..=haystack.len() - needle.len())
        .find(|&i| haystack[i..i + needle.len()].eq_ignore_ascii_case(needle))
}

/// Scans `html` into elements and text nodes. Script and style bodies and
/// comments produce no text nodes.
pub fn scan(html: &str) -> Document {
    let bytes = html.as_bytes();
    let mut doc = Document::default();
    let mut stack: Vec<usize> = Vec::new();
    let mut text_start = 0usize;
    let mut i = 0usize;

    let flush = |doc: &mut Document, stack: &[usize], from: usize, to: usize| {
        if to > from {
            doc.texts.push(TextNode {
                start: from,
                end: to,
                parent: stack.last().copied(),
            });
        }
    };

    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        let rest = &bytes[i..];
        if rest.starts_with(b"<!--") {
            flush(&mut doc, &stack, text_start, i);
            let end = find_ci(bytes, i + 4, b"-->").map_or(bytes.len(), |p| p + 3);
            i = end;
            text_start = end;
        } else if rest.starts_with(b"<!") || rest.starts_with(b"<?") {
            flush(&mut doc, &stack, text_start, i);
            let end = tag_end(bytes, i + 2);
            i = end;
            text_start = end;
        } else if rest.len() > 2 && rest[1] == b'/' && rest[2].is_ascii_alphabetic() {
            flush(&mut doc, &stack, text_start, i);
            let name_end = (i + 2..bytes.len())
                .find(|&j| !is_name_byte(bytes[j]))
                .unwrap_or(bytes.len());
            let name = html[i + 2..name_end].to_ascii_lowercase();
            let end = tag_end(bytes, name_end);
            if let Some(pos) = stack.iter().rposition(|&e| doc.elements[e].name == name) {
                for &open in &stack[pos + 1..] {
                    let el = &mut doc.elements[open];
                    el.content_end = i;
                    el.end = i;
                }
                let el = &mut doc.elements[stack[pos]];
                el.content_end = i;
                el.end = end;
                stack.truncate(pos);
            }
            i = end;
            text_start = end;
        } else if rest.len() > 1 && rest[1].is_ascii_alphabetic() {
            flush(&mut doc, &stack, text_start, i);
            let name_end = (i + 1..bytes.len())
                .find(|&j| !is_name_byte(bytes[j]))
                .unwrap_or(bytes.len());
            let name = html[i + 1..name_end].to_ascii_lowercase();
            let open_end = tag_end(bytes, name_end);
            let self_closing = open_end >= 2 && bytes[open_end - 2] == b'/';
            let idx = doc.elements.len();
            let mut el = Element {
                name,
                start: i,
                open_end,
                content_end: bytes.len(),
                end: bytes.len(),
                parent: stack.last().copied(),
            };
            let mut next = open_end;
            if self_closing || VOID.contains(&el.name.as_str()) {
                el.content_end = open_end;
                el.end = open_end;
                doc.elements.push(el);
            } else if RAW_TEXT.contains(&el.name.as_str()) {
                let closer = format!("</{}", el.name);
                match find_ci(bytes, open_end, closer.as_bytes()) {
                    Some(p) => {
                        el.content_end = p;
                        el.end = tag_end(bytes, p + closer.len());
                    }
                    None => {
                        el.content_end = bytes.len();
                        el.end = bytes.len();
                    }
                }
                next = el.end;
                doc.elements.push(el);
            } else {
                doc.elements.push(el);
                stack.push(idx);
            }
            i = next;
            text_start = next;
        } else {
            // A stray `<` in text.
            i += 1;
        }
    }
    flush(&mut doc, &stack, text_start, bytes.len());
    doc
}

/// Raw attribute string of an opening tag, e.g. `id="a" class="b"` for
/// `<span id="a" class="b">`.
pub fn attr_string(tag: &str) -> &str {
    let inner = tag.trim_start_matches('<');
    let inner = inner.strip_suffix('>').unwrap_or(inner);
    let inner = inner.strip_suffix('/').unwrap_or(inner);
    let name_len = inner.bytes().take_while(|&b| is_name_byte(b)).count();
    inner[name_len..].trim()
}

/// Parses the attributes of an opening tag. Names are lowercased; values
/// are returned with entities decoded.
pub fn attributes(tag: &str) -> Vec<(String, String)> {
    let src = attr_string(tag).as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < src.len() {
        while i < src.len() && (src[i].is_ascii_whitespace() || src[i] == b'/') {
            i += 1;
        }
        let name_start = i;
        while i < src.len() && !src[i].is_ascii_whitespace() && src[i] != b'=' {
            i += 1;
        }
        if name_start == i {
            i += 1;
            continue;
        }
        let name = String::from_utf8_lossy(&src[name_start..i]).to_ascii_lowercase();
        while i < src.len() && src[i].is_ascii_whitespace() {
            i += 1;
        }
        let mut value = String::new();
        if i < src.len() && src[i] == b'=' {
            i += 1;
            while i < src.len() && src[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < src.len() && (src[i] == b'"' || src[i] == b'\'') {
                let q = src[i];
                let v_start = i + 1;
                i = v_start;
                while i < src.len() && src[i] != q {
                    i += 1;
                }
                value = String::from_utf8_lossy(&src[v_start..i.min(src.len())]).into_owned();
                i += 1;
            } else {
                let v_start = i;
                while i < src.len() && !src[i].is_ascii_whitespace() {
                    i += 1;
                }
                value = String::from_utf8_lossy(&src[v_start..i]).into_owned();
            }
        }
        out.push((name, decode_entities(&value)));
    }
    out
}

const NAMED: &[(&str, char)] = &[
    ("amp", '&'),
    ("lt", '<'),
    ("gt", '>'),
    ("quot", '"'),
    ("apos", '\''),
    ("nbsp", '\u{a0}'),
    ("euro", '€'),
    ("pound", '£'),
    ("yen", '¥'),
    ("cent", '¢'),
    ("dollar", '$'),
    ("curren", '¤'),
    ("percnt", '%'),
    ("equals", '='),
];

fn decode_one(entity: &str) -> Option<char> {
    if let Some(num) = entity.strip_prefix('#') {
        let code = if let Some(hex) = num.strip_prefix('x').or_else(|| num.strip_prefix('X')) {
            u32::from_str_radix(hex, 16).ok()?
        } else {
            num.parse().ok()?
        };
        return char::from_u32(code);
    }
    NAMED
        .iter()
        .find(|(name, _)| *name == entity)
        .map(|&(_, c)| c)
}

/// Decodes named (a small currency-oriented table) and numeric character
/// references. Unknown entities are left verbatim.
pub fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        let after = &rest[amp + 1..];
        let decoded = after
            .find(';')
            .filter(|&semi| semi > 0 && semi <= 10)
            .and_then(|semi| decode_one(&after[..semi]).map(|c| (c, semi)));
        match decoded {
            Some((c, semi)) => {
                out.push(c);
                rest = &after[semi + 1..];
            }
            None => {
                out.push('&');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// All the spellings a clue may take in raw HTML: the literal text, its
/// decoded form, and named or numeric references for a single character.
pub fn entity_variants(text: &str) -> Vec<String> {
    let decoded = decode_entities(text);
    let mut variants = vec![text.to_string()];
    let push = |v: String, variants: &mut Vec<String>| {
        if !v.is_empty() && !variants.contains(&v) {
            variants.push(v);
        }
    };
    push(decoded.clone(), &mut variants);
    let mut chars = decoded.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if !c.is_ascii_alphanumeric() {
            for (name, nc) in NAMED {
                if *nc == c {
                    push(format!("&{name};"), &mut variants);
                }
            }
            push(format!("&#{};", c as u32), &mut variants);
            push(format!("&#x{:x};", c as u32), &mut variants);
            push(format!("&#x{:X};", c as u32), &mut variants);
        }
    }
    variants
}

/// Text content of an HTML snippet: tags, comments and script bodies
/// removed, entities decoded.
pub fn visible_text(snippet: &str) -> String {
    let doc = scan(snippet);
    let mut out = String::new();
    for t in &doc.texts {
        out.push_str(&snippet[t.start..t.end]);
    }
    decode_entities(&out)
}
