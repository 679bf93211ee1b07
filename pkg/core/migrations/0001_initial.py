# Generated by Django 5.2.7 on 2026-10-19 10:12

import django.core.validators
import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=100, verbose_name='Nome da experiência')),
                ('seed', models.IntegerField(default=0, validators=[django.core.validators.MinValueValidator(0)], verbose_name='Seed')),
                ('config', models.JSONField(default=dict, verbose_name='Configuração')),
                ('output_dir', models.CharField(max_length=500, verbose_name='Diretório de saída')),
                ('status', models.CharField(choices=[('RUN', 'Em execução'), ('OK', 'Concluída'), ('ERR', 'Falhou')], default='RUN', max_length=3, verbose_name='Estado')),
                ('failed_stage', models.CharField(blank=True, default='', max_length=20, verbose_name='Estágio com falha')),
                ('error_message', models.TextField(blank=True, default='', verbose_name='Mensagem de erro')),
                ('best_accuracy', models.FloatField(blank=True, null=True, verbose_name='Melhor exatidão dividida')),
                ('best_layer', models.IntegerField(blank=True, null=True, verbose_name='Camada da melhor divisão')),
                ('started_at', models.DateTimeField(auto_now_add=True, verbose_name='Início')),
                ('finished_at', models.DateTimeField(blank=True, null=True, verbose_name='Fim')),
            ],
            options={
                'ordering': ['-started_at', '-id'],
            },
        ),
        migrations.CreateModel(
            name='SplitEvaluation',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('layer_index', models.IntegerField(validators=[django.core.validators.MinValueValidator(0)], verbose_name='Camada')),
                ('layer_name', models.CharField(max_length=50, verbose_name='Nome da camada')),
                ('cui_value', models.FloatField(blank=True, null=True, verbose_name='CUI')),
                ('encoded_bytes', models.IntegerField(validators=[django.core.validators.MinValueValidator(0)], verbose_name='Bytes codificados')),
                ('transfer_s', models.FloatField(verbose_name='Transferência estimada (s)')),
                ('accuracy', models.FloatField(blank=True, null=True, verbose_name='Exatidão')),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='evaluations', to='core.experimentrun', verbose_name='Execução')),
            ],
            options={
                'ordering': ['layer_index'],
                'constraints': [models.UniqueConstraint(fields=('run', 'layer_index'), name='unique_layer_per_run')],
            },
        ),
    ]
