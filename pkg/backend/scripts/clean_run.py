import argparse
import shutil
import sys
from pathlib import Path

# A run directory is recognised by the artifacts the stages leave behind.
RUN_MARKERS = ("config.yaml", "data", "checkpoints")


def clean_run(out: str, dry_run: bool = False) -> bool:
    root = Path(out)
    print(f"🧹 Deleting run: {root}")

    if not root.exists():
        print("✅ Nothing there, nothing to delete.")
        return True

    if not any((root / marker).exists() for marker in RUN_MARKERS):
        print(f"❌ {root} does not look like a run directory; refusing to delete it.")
        return False

    for child in sorted(root.iterdir()):
        print(f"{'would delete' if dry_run else '❌ Deleted'} {child.name}")
    if not dry_run:
        shutil.rmtree(root)
        print("✨ Run fully deleted.")
    return True


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Delete a latent bridge run directory")
    parser.add_argument("out")
    parser.add_argument("--dry-run", action="store_true")
    args = parser.parse_args()
    sys.exit(0 if clean_run(args.out, args.dry_run) else 1)
