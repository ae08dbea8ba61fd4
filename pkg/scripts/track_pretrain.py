from src.config import TrainConfig, get_settings, load_train_config
from src.dependencies import RunDir
from src.training import TrainResult, pretrain


def train(config: TrainConfig, run_dir: RunDir) -> TrainResult:
    print(f"Pretraining for {config.epochs} epochs into {run_dir.location}...")
    result = pretrain(config, run_dir)
    final = result.retrieval[-1]
    print(f"I2T R@1 {final.i2t[1]:.2f}  T2I R@1 {final.t2i[1]:.2f}  mean {final.r_mean:.2f}")
    return result


if __name__ == "__main__":
    import logging

    import mlflow

    settings = get_settings()
    logging.basicConfig(level=settings.log_level)
    config = (
        load_train_config(settings.config_path)
        if settings.config_path is not None
        else TrainConfig(output_dir=settings.output_dir / "tracked")
    )

    mlflow.set_tracking_uri(settings.mlflow_tracking_uri or "http://localhost:5000")
    mlflow.set_experiment("syncmask-desk")

    with mlflow.start_run():
        mlflow.log_params(
            {
                "seed": config.seed,
                "epochs": config.epochs,
                "masking": f"{config.masking.text}/{config.masking.image}",
                "grouping": f"{config.grouping.strategy}(s={config.grouping.rank},efn={config.grouping.efn})",
                "lr": config.optimizer.lr,
                "beta": config.momentum.beta,
            }
        )
        run_dir = RunDir(config.output_dir)
        result = train(config, run_dir)
        mlflow.log_text(run_dir.read_file(run_dir.config_path.name), "config.json")
        for metrics in result.metrics:
            mlflow.log_metrics(
                {
                    "l_total": metrics.l_total,
                    "l_mlm": metrics.l_mlm,
                    "l_mim": metrics.l_mim,
                    "l_itc": metrics.l_itc,
                    "l_itm": metrics.l_itm,
                    "visible_mask_fraction": metrics.visible_mask_fraction,
                },
                step=metrics.step,
            )
        for epoch, report in enumerate(result.retrieval):
            mlflow.log_metrics(report.as_record(), step=epoch)
        mlflow.log_artifact(str(run_dir.metrics_path))
