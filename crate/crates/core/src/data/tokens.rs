//! Integer token layout shared by questions, captions and answers.
//!
//! `[0, SPECIAL)` are template words, followed by `event_count` caption
//! words and then one token per scene attribute.

use crate::config::WorldConfig;

pub const WHAT: u32 = 0;
pub const HAPPENS: u32 = 1;
pub const AFTER: u32 = 2;
pub const BEFORE: u32 = 3;
pub const BEGIN: u32 = 4;
pub const END: u32 = 5;
pub const ATTRIBUTE_Q: u32 = 6;
pub const SPECIAL: u32 = 7;

pub fn word(i: usize) -> u32 {
    SPECIAL + i as u32
}

pub fn word_pool_size(world: &WorldConfig) -> usize {
    world.event_count
}

pub fn attribute(world: &WorldConfig, a: usize) -> u32 {
    SPECIAL + word_pool_size(world) as u32 + a as u32
}

pub fn vocab_size(world: &WorldConfig) -> usize {
    SPECIAL as usize + word_pool_size(world) + world.attribute_count
}
