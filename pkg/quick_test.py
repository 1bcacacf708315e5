from pathlib import Path

from config.settings import load_settings
from main import KwsNasPipeline


def main():
    """Main entry point"""

    # Tiny toy run: a few minutes on a laptop CPU
    settings = load_settings(overrides={
        "dataset": "toy",
        "toy_classes": 4,
        "toy_samples_per_class": 40,
        "base_channels": 8,
        "num_layers": 3,
        "pretrain_epochs": 1,
        "search_epochs": 2,
        "retrain_epochs": 5,
        "batch_size": 16,
        "beta": 1,
        "ops_target": 2e5,
        "quant_bits": 8,
        "output_dir": Path("output/quick_test"),
    })

    pipeline = KwsNasPipeline(settings)

    try:
        searched = pipeline.search()
        retrained = pipeline.train(searched.architecture, settings.run.quant_bits)
        cost = pipeline.cost(searched.architecture, settings.run.quant_bits)

        print("🎉 Quick test complete!")
        print(f"🧩 Architecture: {' '.join(searched.architecture.labels())}")
        print(f"📈 Expected ops at the end of search: {searched.log[-1].expected_ops:.0f}")
        print(f"🎯 Test accuracy: {retrained.test_accuracy:.3f}")
        print(f"🧮 Ops: {cost.ops}  Bytes ({settings.run.quant_bits} bit): {cost.bytes:.0f}")
        print(f"📁 Outputs: {settings.run.output_dir}")
        return retrained

    except Exception as e:
        print(f"❌ Quick test failed: {e}")
        raise


if __name__ == "__main__":
    main()
