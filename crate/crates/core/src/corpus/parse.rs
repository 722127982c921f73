use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::{read_text_line, tokenize, CorpusError, Result, TermLexicon};

/// Field separator of the movie-dialog corpus files.
pub const CORNELL_SEPARATOR: &str = " +++$+++ ";

const LINE_FIELDS: usize = 5;
const CONVERSATION_FIELDS: usize = 4;

/// One question/answer exchange, already tokenized.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QaPair {
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

impl QaPair {
    /// Returns `None` unless both sides are non-empty and every token is a
    /// non-empty lowercase string without whitespace.
    pub fn new(question: Vec<String>, answer: Vec<String>) -> Option<Self> {
        let valid = |side: &[String]| {
            !side.is_empty()
                && side.iter().all(|t| {
                    !t.is_empty() && !t.chars().any(char::is_whitespace) && t.to_lowercase() == *t
                })
        };
        (valid(&question) && valid(&answer)).then_some(Self { question, answer })
    }

    pub fn from_text(question: &str, answer: &str) -> Option<Self> {
        Self::new(tokenize(question), tokenize(answer))
    }

    pub fn merge_terms(&self, lexicon: &TermLexicon) -> Self {
        Self {
            question: lexicon.merge(&self.question),
            answer: lexicon.merge(&self.answer),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedCorpus {
    pub pairs: Vec<QaPair>,
    pub warnings: Vec<String>,
}

impl ParsedCorpus {
    fn finish(self) -> Result<Self> {
        if self.pairs.is_empty() {
            Err(CorpusError::EmptyCorpus)
        } else {
            Ok(self)
        }
    }
}

/// Parses the movie-dialog corpus: a lines file of
/// `lineID +++$+++ characterID +++$+++ movieID +++$+++ name +++$+++ text`
/// and a conversations file whose last field lists line ids, e.g.
/// `['L194', 'L195', 'L196']`.
///
/// Each conversation `[u1, .., uk]` contributes the consecutive pairs
/// `(u1, u2), .., (u(k-1), uk)`. A missing line id produces one warning per
/// conversation and drops every pair touching it; malformed records are
/// skipped with a warning.
pub fn parse_cornell(mut lines: impl BufRead, mut conversations: impl BufRead) -> Result<ParsedCorpus> {
    let mut out = ParsedCorpus::default();
    let mut texts: HashMap<String, String> = HashMap::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    while let Some(line) = read_text_line(&mut lines, &mut buf)? {
        line_no += 1;
        let fields: Vec<&str> = line.splitn(LINE_FIELDS, CORNELL_SEPARATOR).collect();
        if fields.len() != LINE_FIELDS {
            out.warnings.push(format!(
                "lines file line {line_no}: expected {LINE_FIELDS} fields, found {}",
                fields.len()
            ));
            continue;
        }
        texts.insert(fields[0].trim().to_string(), fields[4].to_string());
    }

    line_no = 0;
    while let Some(line) = read_text_line(&mut conversations, &mut buf)? {
        line_no += 1;
        let fields: Vec<&str> = line.split(CORNELL_SEPARATOR).collect();
        if fields.len() != CONVERSATION_FIELDS {
            out.warnings.push(format!(
                "conversations file line {line_no}: expected {CONVERSATION_FIELDS} fields, found {}",
                fields.len()
            ));
            continue;
        }
        let Some(ids) = parse_id_list(fields[3]) else {
            out.warnings.push(format!("conversations file line {line_no}: malformed line-id list"));
            continue;
        };
        let resolved: Vec<Option<&String>> = ids.iter().map(|id| texts.get(id)).collect();
        for (id, text) in ids.iter().zip(&resolved) {
            if text.is_none() {
                out.warnings.push(format!(
                    "conversations file line {line_no}: unknown line id {id}; dropping its pairs"
                ));
            }
        }
        for window in resolved.windows(2) {
            if let (Some(q), Some(a)) = (window[0], window[1]) {
                match QaPair::from_text(q, a) {
                    Some(pair) => out.pairs.push(pair),
                    None => out.warnings.push(format!(
                        "conversations file line {line_no}: skipping pair with an empty side"
                    )),
                }
            }
        }
    }
    out.finish()
}

fn parse_id_list(field: &str) -> Option<Vec<String>> {
    let inner = field.trim().strip_prefix('[')?.strip_suffix(']')?;
    let ids: Vec<String> = inner
        .split(',')
        .map(|s| s.trim().trim_matches(|c| c == '\'' || c == '"').to_string())
        .filter(|s| !s.is_empty())
        .collect();
    Some(ids)
}

/// Parses `question<TAB>answer` lines, tokenizing both sides.
pub fn parse_tsv(mut reader: impl BufRead) -> Result<ParsedCorpus> {
    let mut out = ParsedCorpus::default();
    let mut buf = Vec::new();
    let mut line_no = 0;
    while let Some(line) = read_text_line(&mut reader, &mut buf)? {
        line_no += 1;
        let Some((q, a)) = line.split_once('\t') else {
            out.warnings.push(format!("line {line_no}: no TAB separator"));
            continue;
        };
        let (question, answer) = (tokenize(q), tokenize(a));
        if question.is_empty() || answer.is_empty() {
            let side = if question.is_empty() { "question" } else { "answer" };
            out.warnings.push(format!("line {line_no}: empty {side}"));
            continue;
        }
        out.pairs.extend(QaPair::new(question, answer));
    }
    out.finish()
}

/// Writes pairs as `pairs.tsv`: space-joined tokens, one pair per line.
pub fn write_tsv(pairs: &[QaPair], mut writer: impl Write) -> Result<()> {
    for pair in pairs {
        writeln!(writer, "{}\t{}", pair.question.join(" "), pair.answer.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn line(id: &str, text: &str) -> String {
        [id, "u0", "m0", "BIANCA", text].join(CORNELL_SEPARATOR) + "\n"
    }

    fn conversation(ids: &[&str]) -> String {
        let quoted: Vec<String> = ids.iter().map(|i| format!("'{i}'")).collect();
        ["u0", "u2", "m0", &format!("[{}]", quoted.join(", "))].join(CORNELL_SEPARATOR) + "\n"
    }

    #[test]
    fn three_line_conversation() {
        let lines = line("L1", "Hi.") + &line("L2", "Hello.") + &line("L3", "Bye.");
        let convs = conversation(&["L1", "L2", "L3"]);
        let parsed = parse_cornell(lines.as_bytes(), convs.as_bytes()).unwrap();
        assert_eq!(
            parsed.pairs,
            vec![
                QaPair::new(toks(&["hi", "."]), toks(&["hello", "."])).unwrap(),
                QaPair::new(toks(&["hello", "."]), toks(&["bye", "."])).unwrap(),
            ]
        );
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn absent_line_id_drops_pairs_with_one_warning() {
        let lines = line("L1", "Hi.") + &line("L2", "Hello.") + &line("L3", "Bye.");
        let convs = conversation(&["L1", "L2"]) + &conversation(&["L3", "L9"]);
        let parsed = parse_cornell(lines.as_bytes(), convs.as_bytes()).unwrap();
        assert_eq!(parsed.pairs.len(), 1);
        assert_eq!(parsed.warnings.len(), 1);
        assert!(parsed.warnings[0].contains("L9"));
    }

    #[test]
    fn malformed_line_is_skipped() {
        let lines = line("L1", "Hi.")
            + &["L2", "u1", "m0"].join(CORNELL_SEPARATOR)
            + "\n"
            + &line("L3", "Yo.");
        let convs = conversation(&["L1", "L3"]);
        let parsed = parse_cornell(lines.as_bytes(), convs.as_bytes()).unwrap();
        assert_eq!(parsed.pairs.len(), 1);
        assert_eq!(parsed.warnings.len(), 1);
    }

    #[test]
    fn latin1_text_is_decoded() {
        let mut lines = line("L1", "Caf").into_bytes();
        lines.truncate(lines.len() - 1);
        lines.extend([0xE9, b'\n']);
        lines.extend(line("L2", "Oui.").into_bytes());
        let parsed = parse_cornell(lines.as_slice(), conversation(&["L1", "L2"]).as_bytes()).unwrap();
        assert_eq!(parsed.pairs[0].question, toks(&["café"]));
    }

    #[test]
    fn no_pairs_is_empty_corpus() {
        let err = parse_cornell(line("L1", "Hi.").as_bytes(), "".as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyCorpus));
    }

    #[test]
    fn tsv_cases() {
        let parsed = parse_tsv("Hi\tHello there\n".as_bytes()).unwrap();
        assert_eq!(parsed.pairs, vec![QaPair::new(toks(&["hi"]), toks(&["hello", "there"])).unwrap()]);

        let parsed = parse_tsv("no tab here\nHi\tHo\n".as_bytes()).unwrap();
        assert_eq!((parsed.pairs.len(), parsed.warnings.len()), (1, 1));

        let parsed = parse_tsv("\tanswer\nHi\tHo\n".as_bytes()).unwrap();
        assert_eq!((parsed.pairs.len(), parsed.warnings.len()), (1, 1));
        assert!(parsed.warnings[0].contains("empty question"));

        assert!(matches!(parse_tsv("no tab here\n".as_bytes()), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn tsv_round_trip() {
        let pairs = vec![
            QaPair::from_text("What is your name ?", "Laura.").unwrap(),
            QaPair::new(toks(&["hiv", "?"]), toks(&["human_immunodeficiency_virus"])).unwrap(),
        ];
        let mut buf = Vec::new();
        write_tsv(&pairs, &mut buf).unwrap();
        assert_eq!(parse_tsv(buf.as_slice()).unwrap().pairs, pairs);
    }
}
