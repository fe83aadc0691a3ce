//! Reserved token ids shared by the synthetic world and the toy model.
//!
//! The vocabulary is synthetic: ids 0..=10 are reserved control tokens and
//! event tokens start at [`FIRST_EVENT_TOKEN`] (visual objects first, then
//! audio events). A human-readable id-to-name table is written as a sidecar
//! file next to each corpus.

pub type TokenId = usize;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const YES: TokenId = 2;
pub const NO: TokenId = 3;
/// Question head: "do you hear <event>?"
pub const Q_HEAR: TokenId = 4;
/// Question head: "do you see <object>?"
pub const Q_SEE: TokenId = 5;
/// Instruction head: describe what you hear.
pub const PROMPT_AUD: TokenId = 6;
/// Instruction head: describe what you see.
pub const PROMPT_VIS: TokenId = 7;
/// Instruction head: describe what you see and hear.
pub const PROMPT_AV: TokenId = 8;
/// Section marker opening the visual span of a caption.
pub const VIS_MARK: TokenId = 9;
/// Section marker opening the audio span of a caption.
pub const AUD_MARK: TokenId = 10;

pub const FIRST_EVENT_TOKEN: TokenId = 11;

pub const RESERVED_NAMES: [&str; FIRST_EVENT_TOKEN] = [
    "<bos>", "<eos>", "<yes>", "<no>", "<q-hear>", "<q-see>", "<prompt-aud>", "<prompt-vis>",
    "<prompt-av>", "<vis>", "<aud>",
];

/// Valid first tokens of a prompt.
pub const PROMPT_HEADS: [TokenId; 5] = [PROMPT_AUD, PROMPT_VIS, PROMPT_AV, Q_HEAR, Q_SEE];
