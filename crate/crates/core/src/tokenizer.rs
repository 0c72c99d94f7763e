//! Byte-level tokenizer: every byte is a token, plus three specials.

pub type TokenId = u32;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Decodes byte tokens to text, dropping special tokens.
pub fn decode(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Truncates or right-pads `tokens` to exactly `len` with [`PAD`].
/// Returns the padded sequence and the number of real tokens kept.
pub fn fit_to_length(mut tokens: Vec<TokenId>, len: usize) -> (Vec<TokenId>, usize) {
    tokens.truncate(len);
    let valid = tokens.len();
    tokens.resize(len, PAD);
    (tokens, valid)
}
