"""Write the synthetic multi-speaker fixture corpus to a directory."""
import argparse

from ccgan_vc.fixtures import write_fixture_corpus


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out", help="output directory")
    p.add_argument("--speakers", type=int, default=3)
    p.add_argument("--utts", type=int, default=20, help="training utterances per speaker")
    p.add_argument("--eval-utts", type=int, default=2)
    p.add_argument("--frames", type=int, default=256, help="frames per utterance (feature mode)")
    p.add_argument("--audio", action="store_true", help="write WAV tones instead of feature files")
    p.add_argument("--seconds", type=float, default=0.8, help="tone length (audio mode)")
    args = p.parse_args()
    manifest = write_fixture_corpus(args.out, args.speakers, args.utts, args.eval_utts, args.frames,
                                    audio=args.audio, audio_seconds=args.seconds)
    print(f"manifest: {manifest}")


if __name__ == "__main__":
    main()
