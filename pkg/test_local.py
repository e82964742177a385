"""
Local Smoke Script for the Phantom SSL Testbed

Runs each component once on a throwaway 16x16 dataset so a fresh checkout
can be verified end to end in a minute or two.

Usage:
    python test_local.py
    python test_local.py --keep   # leave the scratch directory for inspection
"""

import sys
import tempfile
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))


def smoke_config(scratch: Path):
    from src.models.train_config import TrainConfig

    return TrainConfig(
        seed=0,
        data_root=str(scratch / "data"),
        run_dir=str(scratch / "run"),
        image_size=16,
        n_labeled=4,
        n_unlabeled=4,
        n_val=2,
        n_test=2,
        widths=(4, 8, 8),
        downsample_blocks=(0, 1),
        batch_size=2,
        epochs=1,
        phase2_epochs=1,
        probe_epochs=10,
        embed_dim=16,
    )


def check_gradients():
    """Finite-difference check of every autodiff primitive."""
    print("\n" + "=" * 50)
    print("CHECK: Autodiff gradients")
    print("=" * 50)

    from src.gradcheck import run_gradcheck

    results = run_gradcheck(seed=0, max_coords=50)
    for result in results:
        flag = "ok" if result.passed else "FAILED"
        print(f"  {result.name:16s} 99% error {result.robust_error:.2e}  {flag}")
    if all(r.passed for r in results):
        print("\n[PASS] Gradients match central differences")
        return True
    print("\n[FAIL] Some gradients disagree")
    return False


def check_dataset(config):
    """Generate phantoms and read them back."""
    print("\n" + "=" * 50)
    print("CHECK: Phantom dataset")
    print("=" * 50)

    from src.phantom_data import PhantomSpec, SplitCounts, generate_dataset, load_split, read_dataset

    try:
        counts = SplitCounts(config.n_labeled, config.n_unlabeled, config.n_val, config.n_test)
        generate_dataset(config.data_root, counts, config.seed, PhantomSpec(size=config.image_size))
        manifest = read_dataset(config.data_root)
        samples = load_split(manifest, "labeled")
        for sample in samples:
            print(f"  {sample.id}: view {sample.view.value}, chd {sample.chd}, classes {sorted(set(sample.mask.ravel()))}")
        print(f"\n[PASS] {len(manifest.entries)} phantoms written and read back")
        return True
    except Exception as e:
        print(f"\n[FAIL] Error: {e}")
        return False


def check_refiner(config):
    """Box-prompted refinement of ground-truth masks should adopt every class."""
    print("\n" + "=" * 50)
    print("CHECK: Boundary refinement")
    print("=" * 50)

    from src.boundary_refine import build_refiner, refine_pseudo_label
    from src.phantom_data import load_split, read_dataset

    try:
        refiner = build_refiner(config.refiner)
        adopted = total = 0
        for sample in load_split(read_dataset(config.data_root), "val"):
            result = refine_pseudo_label(sample.image, sample.mask, refiner, config.theta_iou)
            adopted += sum(d.adopted for d in result.decisions)
            total += len(result.decisions)
        print(f"\n  Adopted {adopted}/{total} class regions")
        print("\n[PASS] Refiner ran on every validation mask")
        return True
    except Exception as e:
        print(f"\n[FAIL] Error: {e}")
        return False


def check_pipeline(config):
    """All three training stages for one epoch each."""
    print("\n" + "=" * 50)
    print("CHECK: Training pipeline (1 epoch per phase)")
    print("=" * 50)

    from src.trainer import run_pipeline

    try:
        report = run_pipeline(config)
        for phase in ("phase1", "phase2"):
            test = report[phase]["test"]
            print(f"  {phase}: dice {test['dice_mean']:.2f}, F1 {test['macro_f1']:.2f}, overall {test['overall']:.2f}")
        print(f"  Illegal pseudo-label pixels: {report['mask_audit']['pseudo_illegal']}")
        print(f"\n[PASS] Artifacts written to {config.run_dir}")
        return True
    except Exception as e:
        print(f"\n[FAIL] Error: {e}")
        return False


def main():
    """Run all checks."""
    print("=" * 50)
    print("Phantom SSL Testbed - Local Smoke Checks")
    print("=" * 50)

    keep = "--keep" in sys.argv[1:]
    scratch = Path(tempfile.mkdtemp(prefix="phantom-ssl-"))
    config = smoke_config(scratch)

    results = {"Gradients": check_gradients()}
    results["Dataset"] = check_dataset(config)
    if results["Dataset"]:
        results["Refiner"] = check_refiner(config)
        results["Pipeline"] = check_pipeline(config)

    # Print summary
    print("\n" + "=" * 50)
    print("CHECK SUMMARY")
    print("=" * 50)

    for name, result in results.items():
        status = "[PASS]" if result else "[FAIL]"
        print(f"  {status} {name}")

    print("=" * 50)
    if keep:
        print(f"Scratch directory kept at {scratch}")
    else:
        import shutil
        shutil.rmtree(scratch, ignore_errors=True)

    # Return appropriate exit code
    if not all(results.values()):
        sys.exit(1)


if __name__ == "__main__":
    main()
