# Generated by Django 5.1.1 on 2026-10-17 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=255)),
                ('config', models.TextField()),
                ('seed', models.PositiveIntegerField(default=0)),
                ('status', models.CharField(choices=[('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='running', max_length=20)),
                ('store_path', models.CharField(blank=True, max_length=1024)),
                ('iterations', models.PositiveIntegerField()),
                ('burn_in', models.PositiveIntegerField()),
                ('final_val_loss', models.FloatField(blank=True, null=True)),
                ('failure_reason', models.TextField(blank=True, default='')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-created_at'],
                'indexes': [models.Index(fields=['status'], name='registratio_status_6e1d2a_idx'), models.Index(fields=['created_at'], name='registratio_created_4b7f90_idx')],
            },
        ),
        migrations.CreateModel(
            name='SnapshotRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('iteration', models.PositiveIntegerField()),
                ('validation_loss', models.FloatField()),
                ('weight', models.FloatField()),
                ('file_name', models.CharField(max_length=255)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='snapshots', to='registration.trainingrun')),
            ],
            options={
                'ordering': ['run', 'iteration'],
                'constraints': [models.UniqueConstraint(fields=('run', 'iteration'), name='unique_run_iteration')],
            },
        ),
    ]
