//! Main and sub rewards, the zero-on-malformed gate and reward broadcast.

use mgrpo::rewards::{main_reward, sub_reward, validate_format};
use mgrpo::trajectory::{RewardWeights, Token};

fn main() -> mgrpo::Result<()> {
    let w = RewardWeights::default();
    let (b, e) = (Token::BEGIN, Token::END);
    let truth = [Token(7), Token(9)];

    for (name, out) in [
        ("correct", vec![b, Token(7), Token(9), e]),
        ("wrong", vec![b, Token(7), Token(8), e]),
        ("unterminated", vec![b, Token(7), Token(9)]),
        ("empty payload", vec![b, e]),
    ] {
        let r = main_reward(&out, &truth, &w);
        println!(
            "{name:>14}: format_ok={} total={}",
            validate_format(&out),
            r.total
        );
    }

    // the sub reward mixes format, the main agent's correctness and the expert score
    let report = [b, Token(7), e];
    for (main_correct, expert) in [(1.0, 1.0), (0.0, 1.0), (0.0, 0.5)] {
        let r = sub_reward(&report, main_correct, expert, &w)?;
        println!(
            "sub: main_correct={main_correct} expert={expert} -> {}",
            r.total
        );
    }
    println!(
        "sub, malformed: {}",
        sub_reward(&[b, Token(7)], 1.0, 1.0, &w)?.total
    );
    Ok(())
}
