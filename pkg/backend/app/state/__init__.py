# State management

