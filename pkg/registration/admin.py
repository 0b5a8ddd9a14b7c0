from django.contrib import admin
from .models import SnapshotRecord, TrainingRun


class SnapshotRecordInline(admin.TabularInline):
    model = SnapshotRecord
    extra = 0
    readonly_fields = ('iteration', 'validation_loss', 'weight', 'file_name')
    can_delete = False


@admin.register(TrainingRun)
class TrainingRunAdmin(admin.ModelAdmin):
    """
    Admin configuration for TrainingRun.
    """
    list_display = ('name', 'status', 'iterations', 'burn_in', 'final_val_loss', 'created_at', 'finished_at')
    list_filter = ('status', 'created_at')
    search_fields = ('name', 'store_path')
    ordering = ('-created_at',)
    readonly_fields = ('created_at', 'finished_at')
    inlines = [SnapshotRecordInline]


@admin.register(SnapshotRecord)
class SnapshotRecordAdmin(admin.ModelAdmin):
    """
    Admin configuration for SnapshotRecord.
    """
    list_display = ('run', 'iteration', 'validation_loss', 'weight', 'file_name')
    list_filter = ('run__status',)
    search_fields = ('run__name', 'file_name')
    ordering = ('run', 'iteration')
    list_select_related = ('run',)
