"""Watch the easy/hard memory banks during adaptation.

Usage: python3 demos/banks.py

For each epoch, prints how many samples the two label spaces agree on, the
pseudo-label accuracy of the agreed (easy) subset against the
classifier-space labels of the whole set, the accuracy after kNN
reassessment, and how well the split tracks the generator's own hard tags.
"""
import numpy as np

from cadtrans import AdaptConfig, DomainSpec, adapt_target, generate, train_source


def main():
    source, target = generate(DomainSpec())
    truth = target.sidecar["labels"]
    hard_tag = target.sidecar["hard"].astype(bool)
    cfg = AdaptConfig(target_epochs=10)
    model, _ = train_source(source, cfg)
    res = adapt_target(model, target.without_sidecar(), cfg, truth=truth)
    print("epoch  easy  hard  pl_easy  pl_all  pl_final  hard-tagged in easy bank")
    for row, bank in zip(res.metrics, res.banks):
        in_easy = hard_tag[bank.easy_idx].mean() if bank.n_easy else float("nan")
        print(f"{row['epoch']:5d}  {row['easy_count']:4d}  {row['hard_count']:4d}  {row['pl_acc_easy']:7.3f}"
              f"  {row['pl_acc_all']:6.3f}  {row['pl_acc_final']:8.3f}  {in_easy:.2f}")
    print(f"share of generator-hard samples in the target set: {hard_tag.mean():.2f}")


if __name__ == "__main__":
    np.set_printoptions(precision=3)
    main()
