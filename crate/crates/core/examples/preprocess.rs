//! Normalizes a handful of raw tweets and prints corpus statistics.

use crisis_kit::textprep::{corpus_stats, passes_length_filter, preprocess_tweet, RawTweet, DEFAULT_MIN_TOKENS};

const RAW: &[&str] = &[
    "Quake near city! https://t.co/abc @john &amp; family safe",
    "@RedCross shelters open at Lincoln High &gt;&gt; bring blankets and water, volunteers needed tonight",
    "Evacuation order for zones A and B.\n\nLeave now:   www.county.gov/evac   #wildfire 🔥",
    "rt",
];

fn main() {
    let mut kept = Vec::new();
    for line in RAW {
        let clean = preprocess_tweet(&RawTweet::new(*line));
        let keep = passes_length_filter(&clean, DEFAULT_MIN_TOKENS);
        println!("{} {:?}", if keep { "keep" } else { "drop" }, clean.as_str());
        if keep {
            kept.push(clean.into_string());
        }
    }
    let stats = corpus_stats(&kept);
    println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
}
