#![no_main]

use libfuzzer_sys::fuzz_target;
use ltclip::checkpoint::{decode_store, encode_store, Checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = decode_store(data) {
        let bytes = encode_store(&store).expect("decoded store encodes");
        assert_eq!(decode_store(&bytes).expect("round trip"), store);
    }
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode().expect("decoded checkpoint encodes");
        assert_eq!(Checkpoint::decode(&bytes).expect("round trip"), ck);
    }
});
