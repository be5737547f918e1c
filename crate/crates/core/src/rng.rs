//! Named, independent random streams derived from one master seed.
//!
//! Every consumer of randomness asks for its own stream so that enabling
//! (say) diagnostics probes never shifts the draws seen by training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Data,
    Partition,
    ModelInit,
    ClientShuffle,
    Probe,
    Strategy,
    GpInit,
    Diagnostics,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Partition => 0x7061_7274,
            Stream::ModelInit => 0x6d6f_646c,
            Stream::ClientShuffle => 0x7368_7566,
            Stream::Probe => 0x7072_6f62,
            Stream::Strategy => 0x7374_7261,
            Stream::GpInit => 0x6770_696e,
            Stream::Diagnostics => 0x6469_6167,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Data => "data",
            Stream::Partition => "partition",
            Stream::ModelInit => "model_init",
            Stream::ClientShuffle => "client_shuffle",
            Stream::Probe => "probe",
            Stream::Strategy => "strategy",
            Stream::GpInit => "gp_init",
            Stream::Diagnostics => "diagnostics",
        }
    }

    pub const ALL: [Stream; 8] = [
        Stream::Data,
        Stream::Partition,
        Stream::ModelInit,
        Stream::ClientShuffle,
        Stream::Probe,
        Stream::Strategy,
        Stream::GpInit,
        Stream::Diagnostics,
    ];
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the 64-bit seed of `stream` indexed by `(a, b)`.
pub fn derive_seed(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix(master ^ stream.tag());
    h = splitmix(h ^ a);
    splitmix(h ^ b.rotate_left(32))
}

pub fn stream_rng(master: u64, stream: Stream) -> Rng {
    Rng::seed_from_u64(derive_seed(master, stream, 0, 0))
}

pub fn indexed_rng(master: u64, stream: Stream, a: u64, b: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, stream, a, b))
}
