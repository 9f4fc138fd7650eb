# Generated by Django 3.2.13 on 2026-10-17 09:12

from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(max_length=32)),
                ('status', models.CharField(choices=[('running', 'Running'), ('finished', 'Finished'), ('failed', 'Failed')], default='running', max_length=8)),
                ('seed', models.IntegerField(default=0)),
                ('run_dir', models.CharField(max_length=512)),
                ('config', models.JSONField(default=dict)),
                ('summary', models.JSONField(blank=True, default=dict)),
                ('error', models.TextField(blank=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ('-created_at', '-id'),
            },
        ),
        migrations.CreateModel(
            name='MetricRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('subject', models.CharField(max_length=64)),
                ('drf', models.IntegerField(choices=[(1, 'Full dose'), (4, 'DRF 4'), (10, 'DRF 10'), (20, 'DRF 20'), (50, 'DRF 50'), (100, 'DRF 100')])),
                ('source', models.CharField(choices=[('model', 'Synthesized'), ('low_dose', 'Low-dose input')], default='model', max_length=8)),
                ('psnr', models.FloatField(null=True)),
                ('ssim', models.FloatField()),
                ('nrmse', models.FloatField()),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='metrics', to='django_aegan.experimentrun')),
            ],
            options={
                'unique_together': {('run', 'subject', 'drf', 'source')},
            },
        ),
    ]
