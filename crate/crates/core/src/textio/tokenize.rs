use std::sync::OnceLock;

use regex::Regex;

pub const URL_TOKEN: &str = "<url>";
pub const USER_TOKEN: &str = "<user>";
pub const NUM_TOKEN: &str = "<num>";

fn pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(concat!(
            r"(?P<url>(?:https?://|www\.)\S+)",
            r"|(?P<special><(?:url|user|num)>)",
            r"|(?P<user>@\w+)",
            r"|(?P<tag>#\w+)",
            r"|(?P<num>\d+(?:[.,:/]\d+)*\b)",
            r"|(?P<clitic>'\p{L}+)",
            r"|(?P<word>[\p{L}\p{N}_]+)",
            r"|(?P<punct>[^\s\p{L}\p{N}_])",
        ))
        .expect("tokenizer pattern")
    })
}

/// Lowercases and splits `text` into tokens.
///
/// URLs become `<url>`, @-mentions `<user>`, and numbers `<num>`. Hashtags keep their `#`,
/// clitics keep their apostrophe (`i'm` → `i`, `'m`), and every other punctuation
/// character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase().replace(['\u{2019}', '\u{2018}'], "'");
    let re = pattern();
    let mut out = Vec::new();
    for caps in re.captures_iter(&lowered) {
        let tok = if caps.name("url").is_some() {
            URL_TOKEN.to_string()
        } else if caps.name("user").is_some() {
            USER_TOKEN.to_string()
        } else if caps.name("num").is_some() {
            NUM_TOKEN.to_string()
        } else {
            caps[0].to_string()
        };
        out.push(tok);
    }
    out
}
