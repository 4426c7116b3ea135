//! Transcript normalization: lowercase, abbreviation and acronym expansion,
//! spelled-out numbers, and filtering to the character inventory.

const ABBREVIATIONS: &[(&str, &str)] = &[
    ("mr.", "mister"),
    ("mrs.", "misses"),
    ("ms.", "miss"),
    ("dr.", "doctor"),
    ("st.", "saint"),
    ("jr.", "junior"),
    ("sr.", "senior"),
    ("co.", "company"),
    ("lt.", "lieutenant"),
    ("gen.", "general"),
    ("col.", "colonel"),
    ("capt.", "captain"),
    ("sgt.", "sergeant"),
    ("prof.", "professor"),
    ("gov.", "governor"),
    ("rev.", "reverend"),
    ("hon.", "honorable"),
    ("ft.", "fort"),
    ("mt.", "mount"),
    ("vs.", "versus"),
    ("etc.", "et cetera"),
];

/// Matched case-sensitively against the token with surrounding punctuation
/// removed.
const ACRONYMS: &[(&str, &str)] = &[
    ("U.S.A.", "united states of america"),
    ("U.S.", "united states"),
    ("U.K.", "united kingdom"),
    ("USA", "u s a"),
    ("UK", "u k"),
    ("FBI", "f b i"),
    ("CIA", "c i a"),
    ("BBC", "b b c"),
    ("TV", "t v"),
    ("DNA", "d n a"),
    ("NYC", "n y c"),
    ("ID", "i d"),
];

const ONES: [&str; 20] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
];
const TENS: [&str; 10] = [
    "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

/// Characters kept after normalization, besides `a-z`.
pub(crate) const PUNCTUATION: &[char] = &['.', ',', '?', '!', ';', ':', '-'];

fn below_hundred(n: u32, out: &mut Vec<&'static str>) {
    if n < 20 {
        out.push(ONES[n as usize]);
    } else {
        out.push(TENS[(n / 10) as usize]);
        if n % 10 != 0 {
            out.push(ONES[(n % 10) as usize]);
        }
    }
}

/// Cardinal words for `0..=9999`.
pub fn cardinal(n: u32) -> String {
    assert!(n <= 9999);
    if n == 0 {
        return "zero".into();
    }
    let mut words = Vec::new();
    if n >= 1000 {
        below_hundred(n / 1000, &mut words);
        words.push("thousand");
    }
    let rest = n % 1000;
    if rest >= 100 {
        words.push(ONES[(rest / 100) as usize]);
        words.push("hundred");
    }
    if rest % 100 != 0 {
        below_hundred(rest % 100, &mut words);
    }
    words.join(" ")
}

/// Four-digit numbers read in pairs ("eighteen ninety three"), except
/// round thousands and `x0yy` forms, which read as cardinals.
fn year_style(n: u32) -> String {
    if n % 1000 < 100 {
        return cardinal(n);
    }
    let (hi, lo) = (n / 100, n % 100);
    let mut words = Vec::new();
    below_hundred(hi, &mut words);
    match lo {
        0 => words.push("hundred"),
        1..=9 => {
            words.push("oh");
            words.push(ONES[lo as usize]);
        }
        _ => below_hundred(lo, &mut words),
    }
    words.join(" ")
}

fn digits_spelled(s: &str) -> String {
    s.chars()
        .filter_map(|c| c.to_digit(10))
        .map(|d| ONES[d as usize])
        .collect::<Vec<_>>()
        .join(" ")
}

fn ordinalize(words: &str) -> String {
    let (head, last) = match words.rsplit_once(' ') {
        Some((h, l)) => (Some(h), l),
        None => (None, words),
    };
    let last = match last {
        "one" => "first".to_string(),
        "two" => "second".to_string(),
        "three" => "third".to_string(),
        "five" => "fifth".to_string(),
        "eight" => "eighth".to_string(),
        "nine" => "ninth".to_string(),
        "twelve" => "twelfth".to_string(),
        w if w.ends_with('y') => format!("{}ieth", &w[..w.len() - 1]),
        w => format!("{w}th"),
    };
    match head {
        Some(h) => format!("{h} {last}"),
        None => last,
    }
}

fn integer_words(digits: &str, grouped: bool) -> String {
    let trimmed = digits.trim_start_matches('0');
    if trimmed.is_empty() {
        return "zero".into();
    }
    if digits.len() > 4 || (digits.len() > 1 && digits.starts_with('0')) {
        return digits_spelled(digits);
    }
    let n: u32 = digits.parse().expect("ascii digits");
    if digits.len() == 4 && !grouped {
        year_style(n)
    } else {
        cardinal(n)
    }
}

fn expand_numbers(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len() + 16);
    let mut i = 0;
    let push_words = |out: &mut String, words: &str, next: Option<char>| {
        if out.chars().last().is_some_and(|c| c.is_alphanumeric()) {
            out.push(' ');
        }
        out.push_str(words);
        if next.is_some_and(|c| c.is_alphanumeric()) {
            out.push(' ');
        }
    };
    while i < chars.len() {
        let c = chars[i];
        let currency = c == '$' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit());
        if !(c.is_ascii_digit() || currency) {
            match c {
                '%' => push_words(&mut out, " percent", chars.get(i + 1).copied()),
                '&' => push_words(&mut out, " and ", chars.get(i + 1).copied()),
                _ => out.push(c),
            }
            i += 1;
            continue;
        }
        if currency {
            i += 1;
        }
        let mut digits = String::new();
        let mut grouped = false;
        while i < chars.len() {
            if chars[i].is_ascii_digit() {
                digits.push(chars[i]);
                i += 1;
            } else if chars[i] == ',' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()) && !digits.is_empty() {
                grouped = true;
                i += 1;
            } else {
                break;
            }
        }
        let mut fraction = String::new();
        if chars.get(i) == Some(&'.') && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()) {
            i += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                fraction.push(chars[i]);
                i += 1;
            }
        }
        let suffix: String = chars[i..].iter().take(2).collect::<String>().to_lowercase();
        let after_suffix = chars.get(i + 2).copied();
        let is_ordinal = fraction.is_empty()
            && matches!(suffix.as_str(), "st" | "nd" | "rd" | "th")
            && !after_suffix.is_some_and(|c| c.is_alphabetic());
        let mut words = integer_words(&digits, grouped);
        if !fraction.is_empty() {
            words = format!("{words} point {}", digits_spelled(&fraction));
        }
        if is_ordinal {
            words = ordinalize(&cardinal_for_ordinal(&digits, grouped));
            i += 2;
        }
        if currency {
            words.push_str(if digits == "1" && fraction.is_empty() { " dollar" } else { " dollars" });
        }
        push_words(&mut out, &words, chars.get(i).copied());
    }
    out
}

fn cardinal_for_ordinal(digits: &str, grouped: bool) -> String {
    // ordinals never read year-style
    match digits.parse::<u32>() {
        Ok(n) if n <= 9999 && !(digits.len() > 1 && digits.starts_with('0')) => cardinal(n),
        _ => integer_words(digits, grouped),
    }
}

fn expand_token(token: &str) -> String {
    let lead_len = token.len() - token.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
    let (lead, body) = token.split_at(lead_len);
    // try progressively shorter trailing-punctuation peels so "U.S.," still
    // finds "U.S."
    let mut cut = body.len();
    loop {
        let core = &body[..cut];
        let tail = &body[cut..];
        if let Some((_, exp)) = ACRONYMS.iter().find(|(k, _)| *k == core) {
            return format!("{lead}{exp}{tail}");
        }
        let lower = core.to_lowercase();
        if let Some((_, exp)) = ABBREVIATIONS.iter().find(|(k, _)| *k == lower) {
            return format!("{lead}{exp}{tail}");
        }
        match core.char_indices().last() {
            Some((i, c)) if !c.is_alphanumeric() => cut = i,
            _ => break,
        }
    }
    token.to_string()
}

/// Normalizes a transcript to lowercase words over `a-z`, apostrophe, space
/// and `. , ? ! ; : -`.
///
/// Integers up to 9999 are spelled out (four-digit ungrouped numbers read
/// like years), longer digit strings are read digit by digit, ordinal
/// suffixes become ordinals, and a fixed table of abbreviations and
/// acronyms is expanded. Unknown characters are dropped and whitespace is
/// collapsed.
pub fn normalize_text(raw: &str) -> String {
    let expanded: Vec<String> = raw.split_whitespace().map(expand_token).collect();
    let numbered = expand_numbers(&expanded.join(" "));
    let mut out = String::with_capacity(numbered.len());
    let mut pending_space = false;
    for c in numbered.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if c.is_ascii_lowercase() || c == '\'' || PUNCTUATION.contains(&c) {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinals() {
        assert_eq!(cardinal(0), "zero");
        assert_eq!(cardinal(13), "thirteen");
        assert_eq!(cardinal(40), "forty");
        assert_eq!(cardinal(101), "one hundred one");
        assert_eq!(cardinal(9999), "nine thousand nine hundred ninety nine");
    }

    #[test]
    fn ordinals() {
        assert_eq!(ordinalize("twenty"), "twentieth");
        assert_eq!(ordinalize("twenty one"), "twenty first");
        assert_eq!(ordinalize("eleven"), "eleventh");
    }

    #[test]
    fn trivial_cases() {
        assert_eq!(normalize_text("Hello"), "hello");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("   "), "");
        assert_eq!(normalize_text("«»"), "");
    }

    #[test]
    fn long_numbers_are_digit_by_digit() {
        assert_eq!(normalize_text("10000"), "one zero zero zero zero");
        assert_eq!(normalize_text("007"), "zero zero seven");
    }
}
