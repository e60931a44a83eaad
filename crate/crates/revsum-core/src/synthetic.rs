//! Deterministic templated corpus for smoke tests and overfit runs.
//!
//! Reviews follow one template over small lexicons: the sentiment words are
//! a pure function of the rating, the product word of the product, and the
//! opening style word of the customer, so a model can recover the rating
//! from the text and regenerate the two-token summary exactly.

use crate::corpus::RawReview;
use crate::error::{Error, Result};
use std::path::Path;

/// One style word per synthetic customer.
const STYLES: [&str; 8] =
    ["picky", "casual", "frequent", "careful", "loud", "quiet", "patient", "blunt"];
/// One noun per synthetic product.
const PRODUCTS: [&str; 4] = ["lamp", "kettle", "router", "blanket"];
/// Adjective for rating r lives at index r-1.
const ADJECTIVES: [&str; 5] = ["terrible", "poor", "decent", "good", "great"];
/// Second sentiment word, also indexed by rating.
const ADVERBS: [&str; 5] = ["awful", "weak", "fine", "solid", "superb"];

/// Number of distinct customers in the grid.
pub const SYNTHETIC_CUSTOMERS: usize = 8;
/// Number of distinct products in the grid.
pub const SYNTHETIC_PRODUCTS: usize = 4;
/// One full pass over the customer × product grid.
pub const SYNTHETIC_GRID: usize = SYNTHETIC_CUSTOMERS * SYNTHETIC_PRODUCTS;

/// Generate `n` reviews by walking the customer × product grid; indices past
/// one full pass revisit pairs with later timestamps and shifted ratings.
pub fn synthetic_reviews(n: usize) -> Vec<RawReview> {
    (0..n)
        .map(|i| {
            let ci = i % SYNTHETIC_CUSTOMERS;
            let pj = (i / SYNTHETIC_CUSTOMERS) % SYNTHETIC_PRODUCTS;
            let round = i / SYNTHETIC_GRID;
            let rating = ((ci + pj + round) % 5 + 1) as u8;
            let style = STYLES[ci];
            let product = PRODUCTS[pj];
            let adj = ADJECTIVES[(rating - 1) as usize];
            let adv = ADVERBS[(rating - 1) as usize];
            RawReview {
                review_id: format!("r{i:04}"),
                customer_id: format!("c{ci}"),
                product_id: format!("p{pj}"),
                review_text: format!("{style} buyer says the {product} is {adj} and {adv}"),
                summary_text: format!("{adj} {product}"),
                rating,
                timestamp: (round * 1000 + ci * 100 + pj * 10) as i64,
            }
        })
        .collect()
}

/// Write reviews as one JSON object per line in the dump schema that
/// `corpus::load_reviews` reads (`reviewText`, `summary`, `reviewerID`,
/// `asin`, `overall`, `unixReviewTime`).
pub fn write_jsonl(path: &Path, reviews: &[RawReview]) -> Result<()> {
    let display = path.display().to_string();
    let mut body = String::new();
    for r in reviews {
        let obj = serde_json::json!({
            "reviewerID": r.customer_id,
            "asin": r.product_id,
            "reviewText": r.review_text,
            "summary": r.summary_text,
            "overall": r.rating as f64,
            "unixReviewTime": r.timestamp,
        });
        body.push_str(&obj.to_string());
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(display, e))
}
