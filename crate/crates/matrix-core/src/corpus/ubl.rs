//! UBL invoice XML parsing.
//!
//! Invoices arrive as UBL 2.x XML with deeply nested, namespaced elements.
//! [`parse_ubl`] builds an element tree and a flattened list of
//! `(element path, attributes, text)` entries, one per text-bearing leaf
//! element, in document order. Paths keep namespace prefixes exactly as
//! written (`Invoice/cac:DespatchDocumentReference/cbc:ID`), which is the
//! form extraction heuristics and fixtures refer to.

use quick_xml::events::{BytesRef, Event};
use quick_xml::{Reader, XmlVersion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Parse failure, with the byte offset the reader had reached.
#[derive(Debug, Error)]
pub enum UblParseError {
    #[error("ill-formed XML at byte {offset}: {message}")]
    IllFormed { offset: u64, message: String },
    #[error("document has no root element")]
    NoRoot,
    #[error("second root element `{name}` at byte {offset}")]
    MultipleRoots { name: String, offset: u64 },
    #[error("text content outside the root element at byte {offset}")]
    TextOutsideRoot { offset: u64 },
}

/// One XML element: qualified name as written, attribute list in document
/// order, concatenated direct text content, and child elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct XmlElement {
    pub name: String,
    pub attributes: Vec<(String, String)>,
    pub text: String,
    pub children: Vec<XmlElement>,
}

impl XmlElement {
    fn new(name: String, attributes: Vec<(String, String)>) -> Self {
        XmlElement {
            name,
            attributes,
            text: String::new(),
            children: Vec::new(),
        }
    }

    /// Leaf element (no child elements).
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// One flattened entry: full ancestor path from the root, the leaf's
/// attributes, and its trimmed text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatEntry {
    pub path: String,
    pub attributes: Vec<(String, String)>,
    pub text: String,
}

/// Parse result: the element tree plus the flattened leaf entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedInvoice {
    pub root: XmlElement,
    pub entries: Vec<FlatEntry>,
}

impl ParsedInvoice {
    /// Texts of all entries whose path ends with `suffix` (for quick lookups
    /// like `DespatchDocumentReference/cbc:ID`).
    pub fn texts_at(&self, suffix: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.path.ends_with(suffix))
            .map(|e| e.text.as_str())
            .collect()
    }
}

/// Parse a UBL (or any namespaced) XML document.
///
/// Every text-bearing leaf element appears exactly once in `entries`, in
/// document order, with namespace prefixes preserved on the path segments.
pub fn parse_ubl(xml_text: &str) -> Result<ParsedInvoice, UblParseError> {
    let mut reader = Reader::from_str(xml_text);
    let mut stack: Vec<XmlElement> = Vec::new();
    let mut root: Option<XmlElement> = None;

    loop {
        let event = reader.read_event().map_err(|e| UblParseError::IllFormed {
            offset: reader.buffer_position(),
            message: e.to_string(),
        })?;
        match event {
            Event::Start(start) => {
                if stack.is_empty() && root.is_some() {
                    return Err(UblParseError::MultipleRoots {
                        name: String::from_utf8_lossy(start.name().as_ref()).into_owned(),
                        offset: reader.buffer_position(),
                    });
                }
                stack.push(element_from_tag(&reader, &start)?);
            }
            Event::Empty(start) => {
                if stack.is_empty() && root.is_some() {
                    return Err(UblParseError::MultipleRoots {
                        name: String::from_utf8_lossy(start.name().as_ref()).into_owned(),
                        offset: reader.buffer_position(),
                    });
                }
                let element = element_from_tag(&reader, &start)?;
                attach(&mut stack, &mut root, element);
            }
            Event::End(_) => {
                // Name mismatches are already rejected by the reader.
                let element = stack.pop().expect("end event implies an open element");
                attach(&mut stack, &mut root, element);
            }
            Event::Text(text) => {
                let content = text.xml10_content().map_err(|e| UblParseError::IllFormed {
                    offset: reader.buffer_position(),
                    message: e.to_string(),
                })?;
                match stack.last_mut() {
                    Some(open) => open.text.push_str(&content),
                    None => {
                        if !content.trim().is_empty() {
                            return Err(UblParseError::TextOutsideRoot {
                                offset: reader.buffer_position(),
                            });
                        }
                    }
                }
            }
            Event::CData(cdata) => {
                let content = cdata
                    .xml10_content()
                    .map_err(|e| UblParseError::IllFormed {
                        offset: reader.buffer_position(),
                        message: e.to_string(),
                    })?;
                if let Some(open) = stack.last_mut() {
                    open.text.push_str(&content);
                } else if !content.trim().is_empty() {
                    return Err(UblParseError::TextOutsideRoot {
                        offset: reader.buffer_position(),
                    });
                }
            }
            // Entity references arrive as their own events, between text
            // chunks.
            Event::GeneralRef(reference) => {
                let resolved = resolve_entity(&reader, &reference)?;
                match stack.last_mut() {
                    Some(open) => open.text.push(resolved),
                    None => {
                        return Err(UblParseError::TextOutsideRoot {
                            offset: reader.buffer_position(),
                        })
                    }
                }
            }
            Event::Decl(_) | Event::Comment(_) | Event::PI(_) | Event::DocType(_) => {}
            Event::Eof => break,
        }
    }

    if !stack.is_empty() {
        return Err(UblParseError::IllFormed {
            offset: reader.buffer_position(),
            message: format!("unclosed element `{}`", stack.last().unwrap().name),
        });
    }
    let root = root.ok_or(UblParseError::NoRoot)?;

    let mut entries = Vec::new();
    flatten(&root, &root.name, &mut entries);
    Ok(ParsedInvoice { root, entries })
}

fn element_from_tag(
    reader: &Reader<&[u8]>,
    start: &quick_xml::events::BytesStart<'_>,
) -> Result<XmlElement, UblParseError> {
    let name = String::from_utf8_lossy(start.name().as_ref()).into_owned();
    let mut attributes = Vec::new();
    for attr in start.attributes() {
        let attr = attr.map_err(|e| UblParseError::IllFormed {
            offset: reader.buffer_position(),
            message: e.to_string(),
        })?;
        let key = String::from_utf8_lossy(attr.key.as_ref()).into_owned();
        let value = attr
            .normalized_value(XmlVersion::Implicit1_0)
            .map_err(|e| UblParseError::IllFormed {
                offset: reader.buffer_position(),
                message: e.to_string(),
            })?
            .into_owned();
        attributes.push((key, value));
    }
    Ok(XmlElement::new(name, attributes))
}

fn resolve_entity(reader: &Reader<&[u8]>, reference: &BytesRef<'_>) -> Result<char, UblParseError> {
    let ill_formed = |message: String| UblParseError::IllFormed {
        offset: reader.buffer_position(),
        message,
    };
    if let Some(ch) = reference
        .resolve_char_ref()
        .map_err(|e| ill_formed(e.to_string()))?
    {
        return Ok(ch);
    }
    let name = reference
        .decode()
        .map_err(|e| ill_formed(e.to_string()))?
        .into_owned();
    match name.as_str() {
        "lt" => Ok('<'),
        "gt" => Ok('>'),
        "amp" => Ok('&'),
        "apos" => Ok('\''),
        "quot" => Ok('"'),
        other => Err(ill_formed(format!("unknown entity `&{other};`"))),
    }
}

fn attach(stack: &mut [XmlElement], root: &mut Option<XmlElement>, element: XmlElement) {
    match stack.last_mut() {
        Some(parent) => parent.children.push(element),
        None => *root = Some(element),
    }
}

fn flatten(element: &XmlElement, path: &str, out: &mut Vec<FlatEntry>) {
    if element.is_leaf() {
        let text = element.text.trim();
        if !text.is_empty() {
            out.push(FlatEntry {
                path: path.to_string(),
                attributes: element.attributes.clone(),
                text: text.to_string(),
            });
        }
        return;
    }
    for child in &element.children {
        let child_path = format!("{path}/{}", child.name);
        flatten(child, &child_path, out);
    }
}
