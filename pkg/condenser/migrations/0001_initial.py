from django.db import migrations, models


class Migration( migrations.Migration ):

  initial = True

  dependencies = []

  operations = [
    migrations.CreateModel(
      name = 'CNRun',
      fields = [
        ( 'id', models.BigAutoField( auto_created = True, primary_key = True, serialize = False, verbose_name = 'ID' ) ),
        ( 'command', models.CharField( max_length = 40 ) ),
        ( 'name', models.CharField( blank = True, max_length = 100 ) ),
        ( 'config_hash', models.CharField( blank = True, db_index = True, max_length = 64 ) ),
        ( 'seed', models.BigIntegerField( default = 0 ) ),
        ( 'directory', models.CharField( blank = True, max_length = 500 ) ),
        ( 'started', models.DateTimeField() ),
        ( 'finished', models.DateTimeField( blank = True, null = True ) ),
        ( 'exit_code', models.IntegerField( blank = True, null = True ) ),
        ( 'passed', models.BooleanField( null = True ) ),
        ( 'summary', models.JSONField( blank = True, default = dict ) ),
      ],
      options = {
        'ordering': [ '-started' ],
      },
    ),
  ]
