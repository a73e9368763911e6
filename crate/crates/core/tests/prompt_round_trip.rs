use proptest::prelude::*;
use recap_core::prompting::{build_prompt, parse_prompt};

// Captions: printable text without ", " and not blank.
fn caption() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_.:;'!? éü-]{1,20}".prop_filter("no separator, not blank", |c| {
        !c.contains(", ") && !c.trim().is_empty()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn parse_recovers_the_caption_list(caps in prop::collection::vec(caption(), 0..6)) {
        let prompt = build_prompt(&caps).unwrap();
        prop_assert!(prompt.ends_with("This audio sounds like:"));
        prop_assert_eq!(parse_prompt(&prompt).unwrap(), caps);
    }
}

#[test]
fn template_is_exact() {
    let p = build_prompt(&["a dog barks", "rain falls"]).unwrap();
    let expected = "Audios similar to this audio sounds like: a dog barks, rain falls. This audio sounds like:";
    assert_eq!(p.as_bytes(), expected.as_bytes());
}
