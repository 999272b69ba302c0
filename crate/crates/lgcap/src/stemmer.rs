use rust_stemmers::{Algorithm, Stemmer};

/// Snowball English stemmer behind the core stemming trait.
pub struct EnglishStemmer(Stemmer);

impl Default for EnglishStemmer {
    fn default() -> Self {
        Self(Stemmer::create(Algorithm::English))
    }
}

impl lgcap_core::metrics::Stemmer for EnglishStemmer {
    fn stem(&self, word: &str) -> String {
        self.0.stem(word).into_owned()
    }
}
