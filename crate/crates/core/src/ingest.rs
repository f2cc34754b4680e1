//! Streaming readers for StackExchange dump files (`Posts.xml`, `PostLinks.xml`).
//!
//! Both dump files are a flat list of self-closing `<row .../>` elements whose
//! data lives entirely in attributes. The readers below pull one row at a time
//! from any [`BufRead`] source, so memory use does not grow with the file.

use std::io::{BufRead, Write};

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::PostId;

/// `LinkTypeId` the dump uses for "duplicate of".
pub const DUPLICATE_LINK_TYPE: u32 = 3;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostType {
    Question,
    Answer,
    /// Any other `PostTypeId` (tag wikis, moderator nominations, ...), kept
    /// with its raw id so statistics can be audited.
    Other(u32),
}

impl PostType {
    pub fn from_id(id: u32) -> Self {
        match id {
            1 => PostType::Question,
            2 => PostType::Answer,
            other => PostType::Other(other),
        }
    }

    pub fn id(self) -> u32 {
        match self {
            PostType::Question => 1,
            PostType::Answer => 2,
            PostType::Other(id) => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPostRow {
    pub id: PostId,
    pub post_type: PostType,
    pub accepted_answer_id: Option<PostId>,
    pub parent_id: Option<PostId>,
    pub title: Option<String>,
    pub body_html: String,
    pub tags: Vec<String>,
    pub favorite_count: Option<i64>,
    pub score: Option<i64>,
}

impl RawPostRow {
    /// Checks the row-level invariants: positive id, answers carry a parent,
    /// questions carry a title.
    pub fn is_valid(&self) -> bool {
        self.id > 0
            && (self.post_type != PostType::Answer || self.parent_id.is_some())
            && (self.post_type != PostType::Question || self.title.is_some())
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t.eq_ignore_ascii_case(tag))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkType {
    Duplicate,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLinkRow {
    pub post_id: PostId,
    pub related_post_id: PostId,
    pub link_type: LinkType,
}

/// Rows that were read but not yielded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub missing_id: u64,
    pub missing_type: u64,
    /// Unparseable numbers or rows breaking their type invariants.
    pub invalid: u64,
}

impl SkipReport {
    pub fn total(&self) -> u64 {
        self.missing_id + self.missing_type + self.invalid
    }
}

/// Parses the angle-bracket tag format (`<python><pandas>`) and the newer
/// pipe-delimited one (`|python|pandas|`), lowercasing every tag.
pub fn parse_tags(raw: &str) -> Vec<String> {
    raw.split(['<', '>', '|'])
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Shared row loop for both dump files.
struct RowReader<R: BufRead> {
    reader: Reader<R>,
    buf: Vec<u8>,
    done: bool,
}

impl<R: BufRead> RowReader<R> {
    fn new(source: R) -> Self {
        Self {
            reader: Reader::from_reader(source),
            buf: Vec::with_capacity(8 * 1024),
            done: false,
        }
    }

    fn xml_error(&self, message: impl ToString) -> IngestError {
        IngestError::Xml {
            offset: self.reader.error_position(),
            message: message.to_string(),
        }
    }

    /// Returns the attributes of the next `row` element, decoded once.
    fn next_row(&mut self) -> Option<Result<Vec<(String, String)>, IngestError>> {
        if self.done {
            return None;
        }
        loop {
            self.buf.clear();
            let event = match self.reader.read_event_into(&mut self.buf) {
                Ok(ev) => ev,
                Err(e) => {
                    self.done = true;
                    return Some(Err(self.xml_error(e)));
                }
            };
            match event {
                Event::Empty(ref start) | Event::Start(ref start) if start.local_name().as_ref() == b"row" => {
                    let attrs = collect_attributes(start);
                    return Some(attrs.map_err(|msg| {
                        self.done = true;
                        IngestError::Xml {
                            offset: self.reader.buffer_position(),
                            message: msg,
                        }
                    }));
                }
                Event::Eof => {
                    self.done = true;
                    return None;
                }
                _ => {}
            }
        }
    }
}

fn collect_attributes(start: &BytesStart<'_>) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for attr in start.attributes() {
        let attr = attr.map_err(|e| e.to_string())?;
        let key = String::from_utf8(attr.key.as_ref().to_vec()).map_err(|e| e.to_string())?;
        let value = attr.unescape_value().map_err(|e| e.to_string())?;
        out.push((key, value.into_owned()));
    }
    Ok(out)
}

fn attr<'a>(attrs: &'a [(String, String)], name: &str) -> Option<&'a str> {
    attrs.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
}

enum Field<T> {
    Absent,
    Bad,
    Value(T),
}

fn numeric<T: std::str::FromStr>(attrs: &[(String, String)], name: &str) -> Field<T> {
    match attr(attrs, name) {
        None => Field::Absent,
        Some(v) => match v.trim().parse() {
            Ok(n) => Field::Value(n),
            Err(_) => Field::Bad,
        },
    }
}

fn optional<T: std::str::FromStr>(attrs: &[(String, String)], name: &str) -> Result<Option<T>, ()> {
    match numeric(attrs, name) {
        Field::Absent => Ok(None),
        Field::Bad => Err(()),
        Field::Value(v) => Ok(Some(v)),
    }
}

/// Lazily yields posts in file order.
///
/// Rows missing `Id` or `PostTypeId`, or violating [`RawPostRow::is_valid`],
/// are counted in [`PostsReader::skips`] and never yielded. The first XML
/// error ends the stream.
pub struct PostsReader<R: BufRead> {
    rows: RowReader<R>,
    skips: SkipReport,
}

pub fn parse_posts_stream<R: BufRead>(source: R) -> PostsReader<R> {
    PostsReader {
        rows: RowReader::new(source),
        skips: SkipReport::default(),
    }
}

impl<R: BufRead> PostsReader<R> {
    pub fn skips(&self) -> SkipReport {
        self.skips
    }

    fn convert(&mut self, attrs: &[(String, String)]) -> Option<RawPostRow> {
        let id = match numeric::<PostId>(attrs, "Id") {
            Field::Value(id) => id,
            Field::Absent => {
                self.skips.missing_id += 1;
                return None;
            }
            Field::Bad => {
                self.skips.invalid += 1;
                return None;
            }
        };
        let post_type = match numeric::<u32>(attrs, "PostTypeId") {
            Field::Value(t) => PostType::from_id(t),
            Field::Absent => {
                self.skips.missing_type += 1;
                return None;
            }
            Field::Bad => {
                self.skips.invalid += 1;
                return None;
            }
        };
        let parsed = (|| {
            Some(RawPostRow {
                id,
                post_type,
                accepted_answer_id: optional(attrs, "AcceptedAnswerId").ok()?,
                parent_id: optional(attrs, "ParentId").ok()?,
                title: attr(attrs, "Title").map(str::to_owned),
                body_html: attr(attrs, "Body").unwrap_or_default().to_owned(),
                tags: attr(attrs, "Tags").map(parse_tags).unwrap_or_default(),
                favorite_count: optional(attrs, "FavoriteCount").ok()?,
                score: optional(attrs, "Score").ok()?,
            })
        })();
        match parsed {
            Some(row) if row.is_valid() => Some(row),
            _ => {
                self.skips.invalid += 1;
                None
            }
        }
    }
}

impl<R: BufRead> Iterator for PostsReader<R> {
    type Item = Result<RawPostRow, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let attrs = match self.rows.next_row()? {
                Ok(a) => a,
                Err(e) => return Some(Err(e)),
            };
            if let Some(row) = self.convert(&attrs) {
                return Some(Ok(row));
            }
        }
    }
}

/// Lazily yields post links in file order.
pub struct LinksReader<R: BufRead> {
    rows: RowReader<R>,
    skips: SkipReport,
}

pub fn parse_links_stream<R: BufRead>(source: R) -> LinksReader<R> {
    LinksReader {
        rows: RowReader::new(source),
        skips: SkipReport::default(),
    }
}

impl<R: BufRead> LinksReader<R> {
    pub fn skips(&self) -> SkipReport {
        self.skips
    }
}

impl<R: BufRead> Iterator for LinksReader<R> {
    type Item = Result<RawLinkRow, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let attrs = match self.rows.next_row()? {
                Ok(a) => a,
                Err(e) => return Some(Err(e)),
            };
            let post = numeric::<PostId>(&attrs, "PostId");
            let related = numeric::<PostId>(&attrs, "RelatedPostId");
            let kind = numeric::<u32>(&attrs, "LinkTypeId");
            let (post_id, related_post_id, link_type) = match (post, related, kind) {
                (Field::Value(p), Field::Value(r), Field::Value(t)) => (p, r, t),
                (Field::Absent, _, _) | (_, Field::Absent, _) => {
                    self.skips.missing_id += 1;
                    continue;
                }
                (_, _, Field::Absent) => {
                    self.skips.missing_type += 1;
                    continue;
                }
                _ => {
                    self.skips.invalid += 1;
                    continue;
                }
            };
            if post_id == related_post_id {
                self.skips.invalid += 1;
                continue;
            }
            let link_type = if link_type == DUPLICATE_LINK_TYPE {
                LinkType::Duplicate
            } else {
                LinkType::Other
            };
            return Some(Ok(RawLinkRow {
                post_id,
                related_post_id,
                link_type,
            }));
        }
    }
}

/// Keeps questions carrying `tag` (case-insensitive), in order.
pub fn filter_tagged_questions<I>(rows: I, tag: &str) -> impl Iterator<Item = RawPostRow>
where
    I: IntoIterator<Item = RawPostRow>,
{
    let tag = tag.to_lowercase();
    rows.into_iter()
        .filter(move |r| r.post_type == PostType::Question && r.has_tag(&tag))
}

pub fn filter_python_questions<I>(rows: I) -> impl Iterator<Item = RawPostRow>
where
    I: IntoIterator<Item = RawPostRow>,
{
    filter_tagged_questions(rows, "python")
}

fn escape_attr(value: &str) -> String {
    quick_xml::escape::escape(value)
        .replace('\n', "&#xA;")
        .replace('\r', "&#xD;")
        .replace('\t', "&#x9;")
}

/// Writes rows back out in dump layout. Parsing the output yields the same rows.
pub fn write_posts_xml<W: Write>(rows: &[RawPostRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "<?xml version=\"1.0\" encoding=\"utf-8\"?>")?;
    writeln!(out, "<posts>")?;
    for row in rows {
        write!(out, "  <row Id=\"{}\" PostTypeId=\"{}\"", row.id, row.post_type.id())?;
        if let Some(a) = row.accepted_answer_id {
            write!(out, " AcceptedAnswerId=\"{a}\"")?;
        }
        if let Some(p) = row.parent_id {
            write!(out, " ParentId=\"{p}\"")?;
        }
        if let Some(s) = row.score {
            write!(out, " Score=\"{s}\"")?;
        }
        write!(out, " Body=\"{}\"", escape_attr(&row.body_html))?;
        if let Some(t) = &row.title {
            write!(out, " Title=\"{}\"", escape_attr(t))?;
        }
        if !row.tags.is_empty() {
            let tags: String = row.tags.iter().map(|t| format!("<{t}>")).collect();
            write!(out, " Tags=\"{}\"", escape_attr(&tags))?;
        }
        if let Some(f) = row.favorite_count {
            write!(out, " FavoriteCount=\"{f}\"")?;
        }
        writeln!(out, " />")?;
    }
    writeln!(out, "</posts>")
}
