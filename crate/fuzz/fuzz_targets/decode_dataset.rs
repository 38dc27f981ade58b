#![no_main]

use libfuzzer_sys::fuzz_target;
use ltclip::dataset_file::{decode_dataset, encode_dataset};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = decode_dataset(data) {
        // anything that decodes must re-encode to a file that decodes the same
        let again = decode_dataset(&encode_dataset(&ds)).expect("re-encoded dataset decodes");
        assert_eq!(again, ds);
    }
});
