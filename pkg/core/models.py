from django.core.validators import MinValueValidator
from django.db import models


class ExperimentRun(models.Model):
    """
    Regista uma execução do pipeline (ou de um estágio isolado).

    Os artefactos (checkpoints, CSV, SVG, JSON) ficam no diretório de
    saída; esta tabela é apenas o índice local das execuções.
    """

    class Status(models.TextChoices):
        """Estados possíveis de uma execução."""
        RUNNING = 'RUN', 'Em execução'
        DONE = 'OK', 'Concluída'
        FAILED = 'ERR', 'Falhou'

    name = models.CharField(max_length=100, verbose_name="Nome da experiência")
    seed = models.IntegerField(default=0, validators=[MinValueValidator(0)], verbose_name="Seed")
    config = models.JSONField(default=dict, verbose_name="Configuração")
    output_dir = models.CharField(max_length=500, verbose_name="Diretório de saída")

    status = models.CharField(
        max_length=3,
        choices=Status.choices,
        default=Status.RUNNING,
        verbose_name="Estado"
    )
    failed_stage = models.CharField(max_length=20, blank=True, default='', verbose_name="Estágio com falha")
    error_message = models.TextField(blank=True, default='', verbose_name="Mensagem de erro")

    # Atualizada por SplitEvaluation.save()
    best_accuracy = models.FloatField(null=True, blank=True, verbose_name="Melhor exatidão dividida")
    best_layer = models.IntegerField(null=True, blank=True, verbose_name="Camada da melhor divisão")

    started_at = models.DateTimeField(auto_now_add=True, verbose_name="Início")
    finished_at = models.DateTimeField(null=True, blank=True, verbose_name="Fim")

    class Meta:
        ordering = ['-started_at', '-id']

    def __str__(self) -> str:
        return f"{self.name} (seed {self.seed}) - {self.get_status_display()}"


class SplitEvaluation(models.Model):
    """Resultado de um ponto de divisão avaliado numa execução."""
    run = models.ForeignKey(
        ExperimentRun,
        on_delete=models.CASCADE,
        related_name="evaluations",
        verbose_name="Execução"
    )
    layer_index = models.IntegerField(validators=[MinValueValidator(0)], verbose_name="Camada")
    layer_name = models.CharField(max_length=50, verbose_name="Nome da camada")
    cui_value = models.FloatField(null=True, blank=True, verbose_name="CUI")
    encoded_bytes = models.IntegerField(validators=[MinValueValidator(0)], verbose_name="Bytes codificados")
    transfer_s = models.FloatField(verbose_name="Transferência estimada (s)")
    accuracy = models.FloatField(null=True, blank=True, verbose_name="Exatidão")

    class Meta:
        ordering = ['layer_index']
        constraints = [
            models.UniqueConstraint(fields=['run', 'layer_index'], name='unique_layer_per_run'),
        ]

    def save(self, *args, **kwargs) -> None:
        """Mantém em dia a melhor exatidão da execução."""
        run = self.run
        if self.accuracy is not None and (run.best_accuracy is None or self.accuracy > run.best_accuracy):
            run.best_accuracy = self.accuracy
            run.best_layer = self.layer_index
            run.save(update_fields=['best_accuracy', 'best_layer'])

        super().save(*args, **kwargs)

    def __str__(self) -> str:
        return f"{self.run.name}: camada {self.layer_index} ({self.layer_name})"
