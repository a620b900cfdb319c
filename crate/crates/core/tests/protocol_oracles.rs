mod support;

use deltapad_core::protocol::{
    angle_to_pulse, crc8, decode_frame, encode_frame, Ack, AckFlags,
    Frame, ProtocolError, ServoCalibration, FRAME_LEN,
};
use proptest::prelude::*;
use support::{chain_errors, crc8_oracle};

#[test]
fn oracle_agrees_with_published_check_value() {
    // CRC-8 (SMBus) check value for "123456789"
    assert_eq!(crc8_oracle(b"123456789"), 0xF4);
    assert_eq!(crc8(b"123456789"), 0xF4);
}

#[test]
fn golden_centre_frame() {
    let cal = ServoCalibration::default();
    let bytes = encode_frame([1500, 1500, 1500], 0.0, 0, &cal).unwrap();
    let body = [0x00, 0xDC, 0x05, 0xDC, 0x05, 0xDC, 0x05, 0x00];
    let mut expected = vec![0xA5, 0x5A];
    expected.extend(body);
    expected.push(crc8_oracle(&body));
    assert_eq!(bytes.to_vec(), expected);
}

#[test]
fn golden_extreme_frame() {
    let cal = ServoCalibration::default();
    let bytes = encode_frame([500, 2500, 1234], 1.0, 0xFE, &cal).unwrap();
    let body = [0xFE, 0xF4, 0x01, 0xC4, 0x09, 0xD2, 0x04, 0xFF];
    assert_eq!(&bytes[2..10], &body);
    assert_eq!(bytes[10], crc8_oracle(&body));
}

#[test]
fn every_single_bit_flip_is_rejected() {
    let cal = ServoCalibration::default();
    for (pulses, duty, seq) in [([1500, 1500, 1500], 0.0, 0u8), ([600, 2400, 1777], 0.37, 201)] {
        let frame = encode_frame(pulses, duty, seq, &cal).unwrap();
        let mut rejected = 0;
        for bit in 0..FRAME_LEN * 8 {
            let mut c = frame;
            c[bit / 8] ^= 1 << (bit % 8);
            match decode_frame(&c) {
                Err(ProtocolError::BadMagic(..)) => assert!(bit < 16),
                Err(ProtocolError::BadCrc { .. }) => assert!(bit >= 16),
                other => panic!("bit {bit} decoded as {other:?}"),
            }
            rejected += 1;
        }
        assert_eq!(rejected, 88);
    }
}

#[test]
fn length_errors() {
    let cal = ServoCalibration::default();
    let frame = encode_frame([1500; 3], 0.0, 0, &cal).unwrap();
    assert_eq!(decode_frame(&frame[..10]), Err(ProtocolError::ShortFrame(10)));
    assert_eq!(decode_frame(&[]), Err(ProtocolError::ShortFrame(0)));
    let mut long = frame.to_vec();
    long.push(0);
    assert!(decode_frame(&long).is_err());
}

#[test]
fn angle_pulse_count_chain() {
    let cal = ServoCalibration::default();
    let one_count_deg = 20_000.0 / 4096.0 / cal.gain();
    let (worst_pulse, worst_counts) = chain_errors(&cal);
    assert!(worst_pulse <= 0.09, "{worst_pulse}");
    assert!(worst_counts <= one_count_deg, "{worst_counts} > {one_count_deg}");
}

proptest! {
    #[test]
    fn frame_round_trip(p0 in 500u16..=2500, p1 in 500u16..=2500, p2 in 500u16..=2500, duty in any::<u8>(), seq in any::<u8>()) {
        let cal = ServoCalibration::default();
        let bytes = encode_frame([p0, p1, p2], duty as f64 / 255.0, seq, &cal).unwrap();
        prop_assert_eq!(bytes[10], crc8_oracle(&bytes[2..10]));
        prop_assert_eq!(decode_frame(&bytes).unwrap(), Frame { seq, pulses: [p0, p1, p2], duty });
    }

    #[test]
    fn crc_matches_oracle(data in proptest::collection::vec(any::<u8>(), 0..64)) {
        prop_assert_eq!(crc8(&data), crc8_oracle(&data));
    }

    #[test]
    fn angle_map_is_monotone(a in -100.0f64..100.0, b in -100.0f64..100.0, ch in 0usize..3) {
        let cal = ServoCalibration { trim: [3.0, -7.0, 0.0], ..Default::default() };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(angle_to_pulse(lo.to_radians(), &cal, ch).us <= angle_to_pulse(hi.to_radians(), &cal, ch).us);
    }

    #[test]
    fn ack_round_trip(ok in any::<bool>(), seq in any::<u8>(), flags in 0u8..8) {
        let a = Ack { ok, seq, flags: AckFlags::from_byte(flags) };
        prop_assert_eq!(Ack::from_bytes(&a.to_bytes()).unwrap(), a);
    }
}
