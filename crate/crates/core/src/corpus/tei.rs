//! Text extraction from a small subset of TEI.
//!
//! `div`, `p`, `l` and `head` delimit blocks, `lb` breaks a line, and every
//! block becomes one line of output with inner whitespace collapsed. Notes,
//! foreign-language passages and the header are dropped with their content;
//! page and column breaks are ignored. Any other element is transparent:
//! its text is kept and its attributes are not read. When the document has
//! a `<text>` element only its content is extracted.

use quick_xml::events::Event;
use quick_xml::Reader;

use crate::error::{Error, Result};

const BLOCK_ELEMENTS: &[&[u8]] = &[b"div", b"p", b"l", b"head"];
const DROPPED_ELEMENTS: &[&[u8]] = &[b"note", b"foreign", b"teiHeader", b"fw"];

#[derive(Default)]
struct Blocks {
    done: Vec<String>,
    current: String,
}

impl Blocks {
    fn push_text(&mut self, text: &str) {
        self.current.push_str(text);
    }

    fn flush(&mut self) {
        let collapsed = self.current.split_whitespace().collect::<Vec<_>>().join(" ");
        if !collapsed.is_empty() {
            self.done.push(collapsed);
        }
        self.current.clear();
    }

    fn finish(mut self) -> String {
        self.flush();
        self.done.join("\n")
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(src.len());
    let before = &src.as_bytes()[..offset];
    let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
    let col = offset - before.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1) + 1;
    (line, col)
}

fn located(src: &str, offset: u64, message: impl std::fmt::Display) -> Error {
    let (line, col) = line_col(src, offset as usize);
    Error::parse(format!("xml at line {line}, column {col}"), message)
}

/// Plain text of a TEI document, one block per line.
pub fn extract_text(src: &str) -> Result<String> {
    let mut reader = Reader::from_str(src);
    reader.config_mut().check_end_names = true;

    let mut stack: Vec<Vec<u8>> = Vec::new();
    let mut all = Blocks::default();
    let mut in_text = Blocks::default();
    let mut text_depth: Option<usize> = None;
    let mut saw_text = false;
    let mut skip_depth: Option<usize> = None;

    loop {
        let event = reader
            .read_event()
            .map_err(|e| located(src, reader.error_position(), e))?;
        match event {
            Event::Start(e) => {
                let name = e.local_name().as_ref().to_vec();
                stack.push(name.clone());
                if skip_depth.is_some() {
                    continue;
                }
                if DROPPED_ELEMENTS.contains(&name.as_slice()) {
                    skip_depth = Some(stack.len());
                    continue;
                }
                if name == b"text" && text_depth.is_none() {
                    text_depth = Some(stack.len());
                    saw_text = true;
                }
                if BLOCK_ELEMENTS.contains(&name.as_slice()) {
                    all.flush();
                    in_text.flush();
                }
            }
            Event::End(_) => {
                let name = stack.pop().ok_or_else(|| {
                    located(src, reader.buffer_position(), "unexpected closing tag")
                })?;
                let depth = stack.len() + 1;
                if let Some(d) = skip_depth {
                    if d == depth {
                        skip_depth = None;
                    }
                    continue;
                }
                if BLOCK_ELEMENTS.contains(&name.as_slice()) {
                    all.flush();
                    in_text.flush();
                }
                if text_depth == Some(depth) {
                    text_depth = None;
                    in_text.flush();
                }
            }
            Event::Empty(e) => {
                if skip_depth.is_some() {
                    continue;
                }
                let name = e.local_name();
                if name.as_ref() == b"lb" || BLOCK_ELEMENTS.contains(&name.as_ref()) {
                    all.flush();
                    in_text.flush();
                }
            }
            Event::Text(e) => {
                if skip_depth.is_some() {
                    continue;
                }
                let text = e
                    .unescape()
                    .map_err(|err| located(src, reader.buffer_position(), err))?;
                all.push_text(&text);
                if text_depth.is_some() {
                    in_text.push_text(&text);
                }
            }
            Event::CData(e) => {
                if skip_depth.is_some() {
                    continue;
                }
                let raw = e.into_inner();
                let text = String::from_utf8_lossy(&raw);
                all.push_text(&text);
                if text_depth.is_some() {
                    in_text.push_text(&text);
                }
            }
            Event::Eof => break,
            Event::Comment(_) | Event::Decl(_) | Event::PI(_) | Event::DocType(_) => {}
        }
    }
    if let Some(open) = stack.last() {
        return Err(located(
            src,
            src.len() as u64,
            format!("unclosed element <{}>", String::from_utf8_lossy(open)),
        ));
    }
    Ok(if saw_text { in_text.finish() } else { all.finish() })
}
