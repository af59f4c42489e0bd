use serde::Serialize;

/// Parameter counts for covering `K` window positions with `C` input and
/// output channels. Normalization parameters and biases are excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FsmCost {
    pub fsm: u64,
    pub active_conv: u64,
    pub deformable_conv: u64,
}

pub fn fsm_param_count(channels: usize, shift_channels: usize) -> FsmCost {
    let (c, k) = (channels as u64, shift_channels as u64);
    FsmCost {
        fsm: 3 * k * c + 2 * k,
        active_conv: k * c * c + 2 * k,
        deformable_conv: k * c * c + 2 * k * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_case() {
        assert_eq!(
            fsm_param_count(1, 1),
            FsmCost {
                fsm: 5,
                active_conv: 3,
                deformable_conv: 3
            }
        );
    }

    #[test]
    fn backbone_sizes() {
        assert_eq!(fsm_param_count(64, 256).fsm, 49_664);
        let big = fsm_param_count(256, 512);
        assert_eq!(big.fsm, 394_240);
        assert_eq!(big.active_conv, 33_555_456);
    }
}
