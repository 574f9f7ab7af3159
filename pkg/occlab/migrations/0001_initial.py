# Generated by Django 5.2.6 on 2025-10-14 09:12

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
                ('subcommand', models.CharField(max_length=20)),
                ('experiment', models.CharField(max_length=100)),
                ('output_dir', models.CharField(max_length=500)),
                ('config', models.JSONField(default=dict)),
                ('seeds', models.JSONField(default=list)),
                ('status', models.CharField(choices=[('running', 'Running'), ('succeeded', 'Succeeded'), ('failed', 'Failed')], default='running', max_length=20)),
                ('error', models.TextField(blank=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='MetricsRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('method', models.CharField(max_length=50)),
                ('seed', models.PositiveIntegerField()),
                ('x', models.FloatField()),
                ('metric', models.CharField(max_length=100)),
                ('value', models.FloatField()),
                ('seconds', models.FloatField(default=0)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='metrics', to='occlab.experimentrun')),
            ],
            options={
                'ordering': ['id'],
            },
        ),
    ]
